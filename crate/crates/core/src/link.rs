//! Link between unconstrained transition parameters and row-stochastic
//! transition matrices.
//!
//! Probabilities increase in `f`. Under the off-diagonal parameterization row
//! `i` is a multinomial logit with the diagonal cell as reference:
//! `P[i][j] = exp(f_ij) / (1 + sum_l exp(f_il))` for `j != i`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{ModelSpec, Parameterization};

/// Row-major `K x K` matrix of transition probabilities `P[i][j] = P(z_t = j | z_{t-1} = i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    k: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    /// Checks the row-stochastic invariant to within `1e-12`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let mut data = Vec::with_capacity(k * k);
        for (i, row) in rows.iter().enumerate() {
            check_len("transition matrix row", k, row.len())?;
            if let Some(&v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Input(format!("row {} has entry {v} outside [0, 1]", i + 1)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!("row {} sums to {sum}", i + 1)));
            }
            data.extend_from_slice(row);
        }
        Ok(TransitionMatrix { k, data })
    }

    pub(crate) fn from_raw(k: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), k * k);
        TransitionMatrix { k, data }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.k).map(<[f64]>::to_vec).collect()
    }
}

/// Derivatives of the transition matrix with respect to the free parameters.
///
/// Each free parameter only moves its own row, so the Jacobian is stored as
/// one length-`K` vector per parameter: `d(p)[j] = dP[row(p)][j] / df_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkJacobian {
    k: usize,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl LinkJacobian {
    pub fn n_params(&self) -> usize {
        self.rows.len()
    }

    /// Row of the transition matrix moved by parameter `p`.
    pub fn row_of(&self, p: usize) -> usize {
        self.rows[p]
    }

    /// `dP[row_of(p)][j] / df_p` for `j = 0..K`.
    pub fn d(&self, p: usize) -> &[f64] {
        &self.values[p * self.k..(p + 1) * self.k]
    }
}

fn check_f(f: &[f64], spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    check_len("transition parameters", spec.n_transition(), f.len())?;
    if let Some((i, v)) = f.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Input(format!("transition parameter {i} is {v}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Writes `link(f)` into `out` (length `K * K`). No validation.
pub(crate) fn fill_matrix(spec: &ModelSpec, f: &[f64], out: &mut [f64]) {
    let k = spec.k;
    match spec.parameterization {
        Parameterization::Diagonal => {
            for i in 0..k {
                let stay = logistic(f[i]);
                let leave = logistic(-f[i]);
                for j in 0..k {
                    out[i * k + j] = if i == j { stay } else { leave / (k - 1) as f64 };
                }
            }
        }
        Parameterization::OffDiagonal => {
            let m1 = k - 1;
            for i in 0..k {
                let fr = &f[i * m1..(i + 1) * m1];
                let shift = fr.iter().fold(0.0_f64, |a, &b| a.max(b));
                let base = (-shift).exp();
                let mut denom = base;
                for &v in fr {
                    denom += (v - shift).exp();
                }
                let row = &mut out[i * k..(i + 1) * k];
                row[i] = base / denom;
                for (c, &v) in fr.iter().enumerate() {
                    let j = if c < i { c } else { c + 1 };
                    row[j] = (v - shift).exp() / denom;
                }
            }
        }
    }
}

/// Writes the link Jacobian at transition matrix `p` into `out`
/// (length `d * K`, layout of [`LinkJacobian`]).
pub(crate) fn fill_jacobian(spec: &ModelSpec, p: &[f64], out: &mut [f64]) {
    let k = spec.k;
    let d = spec.n_transition();
    for q in 0..d {
        let (i, l) = spec.free_entry(q);
        let row = &p[i * k..(i + 1) * k];
        let dst = &mut out[q * k..(q + 1) * k];
        match spec.parameterization {
            Parameterization::Diagonal => {
                let g = row[i] * (1.0 - row[i]);
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = if j == i { g } else { -g / (k - 1) as f64 };
                }
            }
            Parameterization::OffDiagonal => {
                let pil = row[l];
                for (j, v) in dst.iter_mut().enumerate() {
                    let delta = if j == l { 1.0 } else { 0.0 };
                    *v = pil * (delta - row[j]);
                }
            }
        }
    }
}

/// Maps unconstrained transition parameters to a transition matrix.
pub fn link_f_to_matrix(f: &[f64], spec: &ModelSpec) -> Result<TransitionMatrix> {
    check_f(f, spec)?;
    let mut data = vec![0.0; spec.k * spec.k];
    fill_matrix(spec, f, &mut data);
    Ok(TransitionMatrix::from_raw(spec.k, data))
}

/// Inverse of [`link_f_to_matrix`].
pub fn link_matrix_to_f(p: &TransitionMatrix, spec: &ModelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    check_len("transition matrix order", spec.k, p.k())?;
    let d = spec.n_transition();
    let k = spec.k;
    let interior = |i: usize, j: usize| -> Result<f64> {
        let v = p.get(i, j);
        if v > 0.0 && v < 1.0 {
            Ok(v)
        } else {
            Err(Error::Domain {
                index: i * k + j,
                value: v,
            })
        }
    };
    (0..d)
        .map(|q| {
            let (i, j) = spec.free_entry(q);
            match spec.parameterization {
                Parameterization::Diagonal => Ok(logit(interior(i, i)?)),
                Parameterization::OffDiagonal => Ok((interior(i, j)? / interior(i, i)?).ln()),
            }
        })
        .collect()
}

pub fn link_jacobian(f: &[f64], spec: &ModelSpec) -> Result<LinkJacobian> {
    let p = link_f_to_matrix(f, spec)?;
    let d = spec.n_transition();
    let mut values = vec![0.0; d * spec.k];
    fill_jacobian(spec, p.as_slice(), &mut values);
    Ok(LinkJacobian {
        k: spec.k,
        rows: (0..d).map(|q| spec.free_entry(q).0).collect(),
        values,
    })
}

/// The probabilities addressed by the free parameters: staying probabilities
/// under the diagonal parameterization, off-diagonal cells otherwise.
pub fn free_probabilities(p: &TransitionMatrix, spec: &ModelSpec) -> Vec<f64> {
    (0..spec.n_transition())
        .map(|q| {
            let (i, j) = spec.free_entry(q);
            p.get(i, j)
        })
        .collect()
}

/// Builds the full matrix from the free probabilities of
/// [`free_probabilities`], filling each row's remaining cell(s).
pub fn matrix_from_free_probabilities(free: &[f64], spec: &ModelSpec) -> Result<TransitionMatrix> {
    check_len("free probabilities", spec.n_transition(), free.len())?;
    let k = spec.k;
    let mut rows = vec![vec![0.0; k]; k];
    for (q, &v) in free.iter().enumerate() {
        let (i, j) = spec.free_entry(q);
        rows[i][j] = v;
    }
    for (i, row) in rows.iter_mut().enumerate() {
        match spec.parameterization {
            Parameterization::Diagonal => {
                let rest = (1.0 - row[i]) / (k - 1) as f64;
                for (j, v) in row.iter_mut().enumerate() {
                    if j != i {
                        *v = rest;
                    }
                }
            }
            Parameterization::OffDiagonal => {
                let off: f64 = row.iter().sum();
                row[i] = 1.0 - off;
            }
        }
    }
    TransitionMatrix::from_rows(&rows)
}
