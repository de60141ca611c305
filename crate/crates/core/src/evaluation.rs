//! Label alignment, recovery and forecast metrics, and likelihood profiles.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::estimate::{baseline_probabilities, minimize_bfgs, BfgsOptions, Objective, CONVERGENCE_GTOL};
use crate::filter::{check_data, FilterOutput};
use crate::link::TransitionMatrix;
use crate::model::{Coefficients, ModelSpec, Params};

/// Threshold on `|A_ij|` beyond which a replication is dropped from the
/// slope-group statistics.
pub const DEFAULT_TRIM: f64 = 10.0;
/// Two-sided 95% normal quantile used for Wald intervals.
pub const WALD_Z: f64 = 1.96;

fn for_each_permutation(k: usize, mut visit: impl FnMut(&[usize])) {
    // Heap-free lexicographic enumeration.
    let mut p: Vec<usize> = (0..k).collect();
    loop {
        visit(&p);
        let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
            return;
        };
        let j = (i + 1..k).rev().find(|&j| p[j] > p[i]).expect("successor exists");
        p.swap(i, j);
        p[i + 1..].reverse();
    }
}

/// Permutation `sigma` minimizing `sum_i |mu_hat[sigma[i]] - mu_true[i]|`:
/// `sigma[i]` is the estimated regime matched to true regime `i` (0-based).
/// Ties go to the lexicographically smallest permutation.
pub fn align_labels(mu_hat: &[f64], mu_true: &[f64]) -> Result<Vec<usize>> {
    check_len("estimated means", mu_true.len(), mu_hat.len())?;
    if mu_hat.len() > 8 {
        return Err(Error::Input(format!("label alignment supports at most 8 regimes, got {}", mu_hat.len())));
    }
    let mut best = (f64::INFINITY, Vec::new());
    for_each_permutation(mu_true.len(), |p| {
        let cost: f64 = p.iter().zip(mu_true).map(|(&s, m)| (mu_hat[s] - m).abs()).sum();
        if cost < best.0 {
            best = (cost, p.to_vec());
        }
    });
    Ok(best.1)
}

/// Reorders the free transition entries: the new entry `(i, j)` is the old
/// entry `(sigma[i], sigma[j])`.
pub fn permute_free(spec: &ModelSpec, v: &[f64], sigma: &[usize]) -> Vec<f64> {
    (0..v.len())
        .map(|p| {
            let (i, j) = spec.free_entry(p);
            v[spec.free_index(sigma[i], sigma[j]).expect("permutations keep free cells free")]
        })
        .collect()
}

/// Relabels a parameter set (or a set of standard errors in the same layout)
/// so that new regime `i` is old regime `sigma[i]`.
pub fn apply_permutation(spec: &ModelSpec, params: &Params, sigma: &[usize]) -> Params {
    let mu = sigma.iter().map(|&s| params.mu[s]).collect();
    let sigma2 = if params.sigma2.len() == 1 {
        params.sigma2.clone()
    } else {
        sigma.iter().map(|&s| params.sigma2[s]).collect()
    };
    let f0 = permute_free(spec, &params.f0, sigma);
    let pf = |v: &Vec<f64>| permute_free(spec, v, sigma);
    let coef = match &params.coef {
        Coefficients::None => Coefficients::None,
        Coefficients::Lagged { theta } => Coefficients::Lagged { theta: pf(theta) },
        Coefficients::Exogenous { gamma } => Coefficients::Exogenous { gamma: pf(gamma) },
        Coefficients::Score { a, b } => Coefficients::Score { a: pf(a), b: pf(b) },
    };
    Params { mu, sigma2, f0, coef }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "mu")]
    Mu,
    #[serde(rename = "sigma2")]
    Sigma2,
    #[serde(rename = "pi")]
    Pi,
    #[serde(rename = "A")]
    A,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::Mu => "mu",
            Group::Sigma2 => "sigma2",
            Group::Pi => "pi",
            Group::A => "A",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub group: Group,
    pub bias: f64,
    pub rmse: f64,
    /// `None` when no retained replication has standard errors.
    pub coverage: Option<f64>,
    pub n_used: usize,
}

/// One replication's estimates after label alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedEstimate {
    pub params: Params,
    pub se: Option<Params>,
    pub pi_hat: Vec<f64>,
    pub pi_se: Option<Vec<f64>>,
}

impl AlignedEstimate {
    pub fn new(
        spec: &ModelSpec,
        params: &Params,
        se: Option<&Params>,
        pi_se: Option<&[f64]>,
        sigma: &[usize],
    ) -> Self {
        let params = apply_permutation(spec, params, sigma);
        AlignedEstimate {
            pi_hat: baseline_probabilities(spec, &params),
            se: se.map(|s| apply_permutation(spec, s, sigma)),
            pi_se: pi_se.map(|s| permute_free(spec, s, sigma)),
            params,
        }
    }

    fn group(&self, g: Group) -> (Vec<f64>, Option<Vec<f64>>) {
        match g {
            Group::Mu => (self.params.mu.clone(), self.se.as_ref().map(|s| s.mu.clone())),
            Group::Sigma2 => (self.params.sigma2.clone(), self.se.as_ref().map(|s| s.sigma2.clone())),
            Group::Pi => (self.pi_hat.clone(), self.pi_se.clone()),
            Group::A => (
                self.params.coef.slope().unwrap_or(&[]).to_vec(),
                self.se.as_ref().and_then(|s| s.coef.slope().map(<[f64]>::to_vec)),
            ),
        }
    }
}

/// Per-element bias, RMSE and Wald coverage, averaged within each parameter
/// group. Replications with any `|slope| > trim` are left out of the slope
/// group only.
pub fn recovery_metrics(spec: &ModelSpec, truth: &Params, reps: &[AlignedEstimate], trim: f64) -> Vec<MetricsRow> {
    let mut groups = vec![Group::Mu, Group::Sigma2];
    if spec.n_transition() > 0 {
        groups.push(Group::Pi);
    }
    if truth.coef.slope().is_some() {
        groups.push(Group::A);
    }
    let truth_view = AlignedEstimate {
        pi_hat: baseline_probabilities(spec, truth),
        params: truth.clone(),
        se: None,
        pi_se: None,
    };
    groups
        .into_iter()
        .filter_map(|g| {
            let (true_vals, _) = truth_view.group(g);
            let used: Vec<(Vec<f64>, Option<Vec<f64>>)> = reps
                .iter()
                .map(|r| r.group(g))
                .filter(|(v, _)| g != Group::A || v.iter().all(|x| x.abs() <= trim))
                .collect();
            if used.is_empty() || true_vals.is_empty() {
                return None;
            }
            Some(group_row(g, &true_vals, &used))
        })
        .collect()
}

fn group_row(group: Group, truth: &[f64], used: &[(Vec<f64>, Option<Vec<f64>>)]) -> MetricsRow {
    let n = used.len() as f64;
    let m = truth.len() as f64;
    let mut bias = 0.0;
    let mut rmse = 0.0;
    let mut cover_sum = 0.0;
    let mut cover_elems = 0usize;
    for (e, &t) in truth.iter().enumerate() {
        let err: Vec<f64> = used.iter().map(|(v, _)| v[e] - t).collect();
        bias += err.iter().sum::<f64>() / n;
        rmse += (err.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        let with_se: Vec<bool> = used
            .iter()
            .filter_map(|(v, se)| se.as_ref().map(|s| (v[e] - t).abs() <= WALD_Z * s[e]))
            .collect();
        if !with_se.is_empty() {
            cover_sum += with_se.iter().filter(|c| **c).count() as f64 / with_se.len() as f64;
            cover_elems += 1;
        }
    }
    MetricsRow {
        group,
        bias: bias / m,
        rmse: rmse / m,
        coverage: (cover_elems > 0).then(|| cover_sum / cover_elems as f64),
        n_used: used.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mafe: f64,
    pub msfe: f64,
    pub masfe: f64,
    pub mssfe: f64,
}

/// One-step forecast errors over the periods `t >= cutoff` (0-based), raw and
/// standardized by the predictive standard deviation.
pub fn forecast_metrics(out: &FilterOutput, y: &[f64], cutoff: usize) -> Result<ForecastMetrics> {
    check_len("observations", out.len(), y.len())?;
    if cutoff >= y.len() {
        return Err(Error::Data(format!("cut-off {cutoff} leaves no forecasts out of {}", y.len())));
    }
    let mut acc = [0.0; 4];
    for t in cutoff..y.len() {
        let var = out.pred_var[t];
        assert!(var > 0.0, "predictive variance must be positive, got {var} at t = {t}");
        let e = y[t] - out.pred_mean[t];
        let z = e / var.sqrt();
        acc[0] += e.abs();
        acc[1] += e * e;
        acc[2] += z.abs();
        acc[3] += z * z;
    }
    let n = (y.len() - cutoff) as f64;
    Ok(ForecastMetrics {
        mafe: acc[0] / n,
        msfe: acc[1] / n,
        masfe: acc[2] / n,
        mssfe: acc[3] / n,
    })
}

/// Mean squared and mean absolute difference over every element of every
/// matrix of two transition paths.
pub fn filtered_prob_accuracy(pi_hat_path: &[TransitionMatrix], pi_true_path: &[TransitionMatrix]) -> Result<(f64, f64)> {
    check_len("transition path", pi_true_path.len(), pi_hat_path.len())?;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for (a, b) in pi_hat_path.iter().zip(pi_true_path) {
        check_len("transition matrix", b.as_slice().len(), a.as_slice().len())?;
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            se += (p - q).powi(2);
            ae += (p - q).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("empty transition paths".into()));
    }
    Ok((se / n as f64, ae / n as f64))
}

/// A line through parameter space: grid value `c` fixes the natural-scale
/// coordinates `coords[i]` to `c * direction[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileAxis {
    pub name: String,
    pub coords: Vec<usize>,
    pub direction: Vec<f64>,
}

impl ProfileAxis {
    /// Parses `name` or `name:d1,d2,...`. A name matching one entry of
    /// [`ModelSpec::param_names`] selects that coordinate; a block prefix such
    /// as `A`, `theta` or `sigma2` selects all of its entries, and then the
    /// direction (default all ones) gives the relative weights.
    pub fn parse(spec: &ModelSpec, text: &str) -> Result<Self> {
        let (name, dir) = match text.split_once(':') {
            Some((n, d)) => (n.trim(), Some(d)),
            None => (text.trim(), None),
        };
        let names = spec.param_names();
        let coords: Vec<usize> = match names.iter().position(|n| n == name) {
            Some(i) => vec![i],
            None => names
                .iter()
                .enumerate()
                .filter(|(_, n)| n.split('[').next() == Some(name))
                .map(|(i, _)| i)
                .collect(),
        };
        if coords.is_empty() {
            return Err(Error::Input(format!("unknown profile coordinate '{name}'; known: {}", names.join(" "))));
        }
        let direction = match dir {
            None => vec![1.0; coords.len()],
            Some(d) => d
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Input(format!("bad direction entry '{v}'"))))
                .collect::<Result<Vec<_>>>()?,
        };
        check_len("profile direction", coords.len(), direction.len())?;
        Ok(ProfileAxis {
            name: text.trim().to_string(),
            coords,
            direction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub values: Vec<f64>,
    /// Maximized log-likelihood, `None` when the inner fit failed.
    pub loglik: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub axes: Vec<String>,
    /// Row-major over the grids (last axis fastest).
    pub points: Vec<ProfilePoint>,
}

impl ProfileResult {
    /// Point with the largest maximized log-likelihood.
    pub fn argmax(&self) -> Option<&ProfilePoint> {
        self.points
            .iter()
            .filter(|p| p.loglik.is_some())
            .fold(None, |best: Option<&ProfilePoint>, p| match best {
                Some(b) if b.loglik >= p.loglik => Some(b),
                _ => Some(p),
            })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for a in &self.axes {
            write!(w, "\"{a}\",")?;
        }
        writeln!(w, "loglik,converged")?;
        for p in &self.points {
            for v in &p.values {
                write!(w, "{v},")?;
            }
            match p.loglik {
                Some(l) => writeln!(w, "{l},{}", p.converged)?,
                None => writeln!(w, ",false")?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Profile log-likelihood over a one- or two-dimensional grid. At each grid
/// point the axis coordinates are fixed and the remaining parameters are
/// re-optimized starting from `params_hat`.
pub fn profile_loglik(
    data: &Dataset,
    spec: &ModelSpec,
    params_hat: &Params,
    axes: &[ProfileAxis],
    grids: &[Vec<f64>],
    cutoff: usize,
) -> Result<ProfileResult> {
    check_len("profile grids", axes.len(), grids.len())?;
    if axes.is_empty() || axes.len() > 2 {
        return Err(Error::Input(format!("profiles take one or two axes, got {}", axes.len())));
    }
    if grids.iter().flatten().any(|v| !v.is_finite()) || grids.iter().any(Vec::is_empty) {
        return Err(Error::Input("profile grids must be non-empty and finite".into()));
    }
    params_hat.validate(spec)?;
    check_data(data, spec, cutoff)?;
    let mut fixed_coords: Vec<usize> = axes.iter().flat_map(|a| a.coords.iter().copied()).collect();
    fixed_coords.sort_unstable();
    if fixed_coords.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("profile axes overlap".into()));
    }
    let obj = Objective::new(data, spec, cutoff);
    let u_hat = obj.to_unconstrained(params_hat)?;
    let free: Vec<usize> = (0..u_hat.len()).filter(|i| !fixed_coords.contains(i)).collect();

    let cells: Vec<Vec<f64>> = match grids {
        [g] => g.iter().map(|&a| vec![a]).collect(),
        [g1, g2] => g1.iter().flat_map(|&a| g2.iter().map(move |&b| vec![a, b])).collect(),
        _ => unreachable!(),
    };
    let opts = BfgsOptions {
        gtol: CONVERGENCE_GTOL,
        ..BfgsOptions::default()
    };
    let points = cells
        .into_par_iter()
        .map(|values| {
            let mut nat = params_hat.to_vec();
            for (axis, &c) in axes.iter().zip(&values) {
                for (&i, &d) in axis.coords.iter().zip(&axis.direction) {
                    nat[i] = c * d;
                }
            }
            let Ok(u_fixed) = obj.map.forward(&nat) else {
                return ProfilePoint { values, loglik: None, converged: false };
            };
            let embed = |z: &[f64]| {
                let mut u = u_fixed.clone();
                for (&i, &v) in free.iter().zip(z) {
                    u[i] = v;
                }
                u
            };
            let z0: Vec<f64> = free.iter().map(|&i| u_hat[i]).collect();
            if z0.is_empty() {
                let v = obj.value(&u_fixed);
                return ProfilePoint { values, loglik: v.is_finite().then_some(-v), converged: v.is_finite() };
            }
            let out = minimize_bfgs(|z| obj.value(&embed(z)), &z0, &opts);
            let ll = -out.fx;
            ProfilePoint {
                values,
                loglik: ll.is_finite().then_some(ll),
                converged: out.status.is_success() && out.grad_inf_norm() < CONVERGENCE_GTOL,
            }
        })
        .collect();
    Ok(ProfileResult {
        axes: axes.iter().map(|a| a.name.clone()).collect(),
        points,
    })
}

/// Evenly spaced grid from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}
