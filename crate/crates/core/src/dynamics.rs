//! Time paths of the transition parameters.
//!
//! The lagged and exogenous specifications are linear in a lagged driver.
//! The score-driven specification moves `f` along the scaled score of the
//! one-step predictive log density,
//! `f_t = omega + A s_{t-1} + B (f_{t-1} - omega)`, started at `f_1 = omega`.
//!
//! The score of the predictive mixture
//! `p(y) = sum_i sum_j eta_j(y) P_ij xi_i` with respect to the free parameter
//! `(i, l)` is `xi_i * sum_j eta_j(y) dP_ij/df_il / p(y)`. Writing
//! `r_j(y) = eta_j(y) / p(y)` the score is linear in `r`, `nabla = C r`, so the
//! conditional Fisher information is `C E[r r'] C'`. The `K x K` expectation is
//! taken by Gauss-Hermite quadrature over each Gaussian component of the
//! predictive mixture.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::link::{self, TransitionMatrix};
use crate::model::{Coefficients, ModelSpec, Params};
use crate::quadrature::gauss_hermite_30;

/// Ridge added to the Fisher information before the inverse square root.
pub const FISHER_RIDGE: f64 = 1e-8;
/// Above this condition number the score is left unscaled.
pub const FISHER_CONDITION_LIMIT: f64 = 1e12;
/// `max |A|` below which the score-driven filter runs as the constant filter.
pub const SCORE_FALLBACK_THRESHOLD: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub(crate) fn log_density(y: f64, mu: f64, var: f64) -> f64 {
    let z = y - mu;
    -0.5 * (LN_2PI + var.ln() + z * z / var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scaling {
    InverseSqrtFisher,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledScore {
    /// Raw score, one entry per free transition parameter.
    pub nabla: Vec<f64>,
    /// Scaled score used by the recursion.
    pub s: Vec<f64>,
    /// Conditional Fisher information, `d x d` row-major, before ridging.
    pub fisher: Vec<f64>,
    pub scaling_used: Scaling,
}

/// Transition parameter path with the implied transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FPath {
    pub f: Vec<Vec<f64>>,
    pub pi: Vec<TransitionMatrix>,
}

fn linear_driver(f0: &[f64], slope: &[f64], driver: f64) -> Result<Vec<f64>> {
    if !driver.is_finite() {
        return Err(Error::Input(format!("lagged driver is {driver}")));
    }
    check_len("slope coefficients", f0.len(), slope.len())?;
    Ok(f0.iter().zip(slope).map(|(a, b)| a + b * driver).collect())
}

/// `f_t = alpha + theta * y_{t-1}`.
pub fn f_model1(params: &Params, y_prev: f64) -> Result<Vec<f64>> {
    match &params.coef {
        Coefficients::Lagged { theta } => linear_driver(&params.f0, theta, y_prev),
        _ => Err(Error::Parameter("f_model1 needs lagged-observation coefficients".into())),
    }
}

/// `f_t = beta + gamma * x_{t-1}`.
pub fn f_model2(params: &Params, x_prev: f64) -> Result<Vec<f64>> {
    match &params.coef {
        Coefficients::Exogenous { gamma } => linear_driver(&params.f0, gamma, x_prev),
        _ => Err(Error::Parameter("f_model2 needs exogenous coefficients".into())),
    }
}

/// One step of the mean-reverting score recursion.
pub fn f_model3_step(f_prev: &[f64], s_prev: &ScaledScore, params: &Params) -> Result<Vec<f64>> {
    let Coefficients::Score { a, b } = &params.coef else {
        return Err(Error::Parameter("f_model3_step needs score coefficients".into()));
    };
    let omega = &params.f0;
    check_len("f_prev", omega.len(), f_prev.len())?;
    check_len("scaled score", omega.len(), s_prev.s.len())?;
    if let Some(bad) = b.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Parameter(format!("B entry {bad} outside (0, 1)")));
    }
    let mut out = vec![0.0; omega.len()];
    score_step(omega, a, b, f_prev, &s_prev.s, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn score_step(omega: &[f64], a: &[f64], b: &[f64], f_prev: &[f64], s: &[f64], out: &mut [f64]) {
    for i in 0..omega.len() {
        out[i] = omega[i] + a[i] * s[i] + b[i] * (f_prev[i] - omega[i]);
    }
}

/// True when every score coefficient is below `threshold` in magnitude, in
/// which case the model is run as the constant filter at `link(omega)`.
pub fn gas_fallback_active(params: &Params, threshold: f64) -> bool {
    match &params.coef {
        Coefficients::Score { a, .. } => a.iter().all(|v| v.abs() < threshold),
        _ => false,
    }
}

/// Upper triangle of `sum_m w_m sum_q weight_q eta eta' / p^2` over the node
/// table, with `p = eta . w`.
fn second_moment<const K: usize>(eta: &[f64], node_weight: &[f64], n: usize, w: &[f64], m: &mut [f64]) {
    let mut acc = [[0.0f64; K]; K];
    let wv: [f64; K] = std::array::from_fn(|j| w[j]);
    for comp in 0..K {
        let wm = wv[comp];
        if wm <= 1e-300 {
            continue;
        }
        let rows = &eta[comp * n * K..(comp + 1) * n * K];
        let weights = &node_weight[comp * n..(comp + 1) * n];
        for (e, &nw) in rows.chunks_exact(K).zip(weights) {
            let e: [f64; K] = std::array::from_fn(|j| e[j]);
            let mut p = 0.0;
            for j in 0..K {
                p += e[j] * wv[j];
            }
            if !(p > 0.0) {
                continue;
            }
            let coef = wm * nw / (p * p);
            for a in 0..K {
                let ea = coef * e[a];
                for b in a..K {
                    acc[a][b] += ea * e[b];
                }
            }
        }
    }
    for a in 0..K {
        for b in a..K {
            m[a * K + b] = acc[a][b];
        }
    }
}

fn second_moment_dyn(eta: &[f64], node_weight: &[f64], n: usize, k: usize, w: &[f64], m: &mut [f64]) {
    m.iter_mut().for_each(|v| *v = 0.0);
    for comp in 0..k {
        let wm = w[comp];
        if wm <= 1e-300 {
            continue;
        }
        for q in 0..n {
            let idx = comp * n + q;
            let e = &eta[idx * k..(idx + 1) * k];
            let p: f64 = e.iter().zip(w).map(|(x, wj)| x * wj).sum();
            if !(p > 0.0) {
                continue;
            }
            let coef = wm * node_weight[idx] / (p * p);
            for a in 0..k {
                let ea = coef * e[a];
                for b in a..k {
                    m[a * k + b] += ea * e[b];
                }
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of the symmetric row-major `d x d`
/// matrix `a`. On return the eigenvalues are on the diagonal of `a` and the
/// eigenvectors in the columns of `v`.
pub(crate) fn jacobi_eigen(a: &mut [f64], v: &mut [f64], d: usize) {
    v.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..d {
            diag += a[i * d + i] * a[i * d + i];
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off <= 1e-32 * diag || off == 0.0 {
            return;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let tan = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let tan = if theta == 0.0 { 1.0 } else { tan };
                let c = 1.0 / (tan * tan + 1.0).sqrt();
                let sn = tan * c;
                for r in 0..d {
                    let arp = a[r * d + p];
                    let arq = a[r * d + q];
                    a[r * d + p] = c * arp - sn * arq;
                    a[r * d + q] = sn * arp + c * arq;
                }
                for r in 0..d {
                    let apr = a[p * d + r];
                    let aqr = a[q * d + r];
                    a[p * d + r] = c * apr - sn * aqr;
                    a[q * d + r] = sn * apr + c * aqr;
                }
                for r in 0..d {
                    let vrp = v[r * d + p];
                    let vrq = v[r * d + q];
                    v[r * d + p] = c * vrp - sn * vrq;
                    v[r * d + q] = sn * vrp + c * vrq;
                }
            }
        }
    }
}

/// Precomputed quadrature table for one parameter point.
///
/// The component densities at the quadrature nodes depend only on the regime
/// means and variances, so they are evaluated once per likelihood call.
pub(crate) struct ScoreContext {
    k: usize,
    d: usize,
    n_nodes: usize,
    mu: Vec<f64>,
    var: Vec<f64>,
    /// `node_weight[m * n + q]`: quadrature weight of node `q` of component `m`.
    node_weight: Vec<f64>,
    /// `eta[(m * n + q) * k + j]`: density of regime `j` at node `q` of component `m`.
    eta: Vec<f64>,
    // scratch
    r: Vec<f64>,
    c: Vec<f64>,
    m: Vec<f64>,
    log_eta: Vec<f64>,
    log_norm: Vec<f64>,
    info: Vec<f64>,
    vecs: Vec<f64>,
    proj: Vec<f64>,
    chol: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
    w_vecs: Vec<f64>,
    u: Vec<f64>,
}

impl ScoreContext {
    pub(crate) fn new(spec: &ModelSpec, params: &Params) -> Self {
        let gh = gauss_hermite_30();
        let k = spec.k;
        let n = gh.nodes.len();
        let mu = params.mu.clone();
        let var: Vec<f64> = (0..k).map(|j| params.sigma2_of(j)).collect();
        let root_pi = std::f64::consts::PI.sqrt();
        let mut node_weight = Vec::with_capacity(k * n);
        let mut eta = Vec::with_capacity(k * n * k);
        for m in 0..k {
            let scale = (2.0 * var[m]).sqrt();
            for (x, w) in gh.nodes.iter().zip(&gh.weights) {
                let y = mu[m] + scale * x;
                node_weight.push(w / root_pi);
                for j in 0..k {
                    eta.push(log_density(y, mu[j], var[j]).exp());
                }
            }
        }
        let d = spec.n_transition();
        let log_norm = var.iter().map(|v| -0.5 * (LN_2PI + v.ln())).collect();
        ScoreContext {
            k,
            d,
            n_nodes: n,
            mu,
            var,
            node_weight,
            eta,
            r: vec![0.0; k],
            c: vec![0.0; d * k],
            m: vec![0.0; k * k],
            log_eta: vec![0.0; k],
            log_norm,
            info: vec![0.0; d * d],
            vecs: vec![0.0; d * d],
            proj: vec![0.0; d],
            chol: vec![0.0; k * k],
            g: vec![0.0; d * k],
            h: vec![0.0; k * k],
            w_vecs: vec![0.0; k * k],
            u: vec![0.0; d],
        }
    }

    /// `info = C M C'`.
    fn fill_information(&mut self) {
        let (k, d) = (self.k, self.d);
        for q1 in 0..d {
            let c1 = &self.c[q1 * k..(q1 + 1) * k];
            for q2 in q1..d {
                let c2 = &self.c[q2 * k..(q2 + 1) * k];
                let mut v = 0.0;
                for a in 0..k {
                    if c1[a] == 0.0 {
                        continue;
                    }
                    let mut inner = 0.0;
                    for b in 0..k {
                        inner += self.m[a * k + b] * c2[b];
                    }
                    v += c1[a] * inner;
                }
                self.info[q1 * d + q2] = v;
                self.info[q2 * d + q1] = v;
            }
        }
    }

    /// `(I + ridge)^{-1/2} nabla` through the `K x K` problem.
    ///
    /// With `M = L L'` and `G = C L` the information is `G G'`, whose nonzero
    /// eigenpairs follow from the eigendecomposition `G'G = W S W'` as
    /// `u_e = G w_e / sqrt(s_e)`. On the orthogonal complement the ridged
    /// information is `ridge * I`. Returns `None` when `M` is not positive
    /// definite, leaving the full decomposition to the caller.
    fn whiten_low_rank(&mut self, nabla: &[f64], s: &mut [f64]) -> Option<Scaling> {
        let (k, d) = (self.k, self.d);
        let m = &self.m;
        let l = &mut self.chol;
        for i in 0..k {
            for j in 0..=i {
                let mut v = m[i * k + j];
                for p in 0..j {
                    v -= l[i * k + p] * l[j * k + p];
                }
                if i == j {
                    if !(v > 0.0) {
                        return None;
                    }
                    l[i * k + i] = v.sqrt();
                } else {
                    l[i * k + j] = v / l[j * k + j];
                }
            }
            for j in i + 1..k {
                l[i * k + j] = 0.0;
            }
        }
        let g = &mut self.g;
        for q in 0..d {
            for e in 0..k {
                let mut v = 0.0;
                for a in e..k {
                    v += self.c[q * k + a] * l[a * k + e];
                }
                g[q * k + e] = v;
            }
        }
        let h = &mut self.h;
        for a in 0..k {
            for b in a..k {
                let v: f64 = (0..d).map(|q| g[q * k + a] * g[q * k + b]).sum();
                h[a * k + b] = v;
                h[b * k + a] = v;
            }
        }
        jacobi_eigen(h, &mut self.w_vecs, k);
        let smax = (0..k).map(|e| h[e * k + e]).fold(0.0, f64::max);
        // The null direction of C gives an eigenvalue that is zero up to roundoff.
        let tol = 1e-20 * smax.max(f64::MIN_POSITIVE);
        s.iter_mut().for_each(|v| *v = 0.0);
        self.proj.copy_from_slice(nabla);
        let mut kept = 0;
        let mut lmin = f64::INFINITY;
        for e in 0..k {
            let se = h[e * k + e];
            if !(se > tol) {
                continue;
            }
            kept += 1;
            let lambda = se + FISHER_RIDGE;
            lmin = lmin.min(lambda);
            let inv = 1.0 / se.sqrt();
            let mut c = 0.0;
            for q in 0..d {
                let u: f64 = (0..k).map(|b| g[q * k + b] * self.w_vecs[b * k + e]).sum::<f64>() * inv;
                self.u[q] = u;
                c += u * nabla[q];
            }
            let scale = c / lambda.sqrt();
            for q in 0..d {
                s[q] += self.u[q] * scale;
                self.proj[q] -= self.u[q] * c;
            }
        }
        if kept < d {
            lmin = lmin.min(FISHER_RIDGE);
        }
        let lmax = smax + FISHER_RIDGE;
        if !(lmin > 0.0) || lmax / lmin > FISHER_CONDITION_LIMIT {
            s.copy_from_slice(nabla);
            return Some(Scaling::Identity);
        }
        if kept < d {
            let inv = 1.0 / FISHER_RIDGE.sqrt();
            for q in 0..d {
                s[q] += self.proj[q] * inv;
            }
        }
        Some(Scaling::InverseSqrtFisher)
    }

    /// Scaled score at observation `y`.
    ///
    /// `xi_prev` is the filtered distribution before the transition, `p_mat`
    /// and `jac` the link output at the current `f`, and `w = P' xi_prev` the
    /// predicted distribution. Writes into `out` and returns the scaling used.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn score(
        &mut self,
        t: usize,
        y: f64,
        xi_prev: &[f64],
        jac: &[f64],
        w: &[f64],
        want_fisher: bool,
        nabla: &mut [f64],
        s: &mut [f64],
        fisher_out: Option<&mut Vec<f64>>,
        spec: &ModelSpec,
    ) -> Result<Scaling> {
        let (k, d) = (self.k, self.d);

        // r_j(y) = eta_j(y) / p(y) in log space.
        let mut log_p_max = f64::NEG_INFINITY;
        for j in 0..k {
            let z = y - self.mu[j];
            self.log_eta[j] = self.log_norm[j] - 0.5 * z * z / self.var[j];
            if w[j] > 0.0 {
                log_p_max = log_p_max.max(self.log_eta[j] + w[j].ln());
            }
        }
        let mut acc = 0.0;
        for j in 0..k {
            if w[j] > 0.0 {
                acc += (self.log_eta[j] + w[j].ln() - log_p_max).exp();
            }
        }
        let log_p = log_p_max + acc.ln();
        if !log_p.is_finite() {
            return Err(Error::Degenerate { t });
        }
        for j in 0..k {
            self.r[j] = (self.log_eta[j] - log_p).exp();
        }

        // C[q][j] = xi_{row(q)} dP_{row(q), j} / df_q
        for q in 0..d {
            let (row, _) = spec.free_entry(q);
            let xi = xi_prev[row];
            let mut g = 0.0;
            for j in 0..k {
                let c = xi * jac[q * k + j];
                self.c[q * k + j] = c;
                g += c * self.r[j];
            }
            nabla[q] = g;
        }

        // M = E[r r'] under the predictive mixture.
        match k {
            2 => second_moment::<2>(&self.eta, &self.node_weight, self.n_nodes, w, &mut self.m),
            3 => second_moment::<3>(&self.eta, &self.node_weight, self.n_nodes, w, &mut self.m),
            4 => second_moment::<4>(&self.eta, &self.node_weight, self.n_nodes, w, &mut self.m),
            _ => second_moment_dyn(&self.eta, &self.node_weight, self.n_nodes, k, w, &mut self.m),
        }
        for a in 0..k {
            for b in 0..a {
                self.m[a * k + b] = self.m[b * k + a];
            }
        }

        if self.m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate { t });
        }
        if want_fisher {
            self.fill_information();
            if let Some(out) = fisher_out {
                out.clear();
                out.extend_from_slice(&self.info);
            }
        }
        if let Some(scaling) = self.whiten_low_rank(nabla, s) {
            return Ok(scaling);
        }
        if !want_fisher {
            self.fill_information();
        }
        let info = &mut self.info;
        if info.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate { t });
        }

        for q in 0..d {
            info[q * d + q] += FISHER_RIDGE;
        }
        if d <= 2 {
            jacobi_eigen(info, &mut self.vecs, d);
        } else {
            let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(d, d, info));
            for q in 0..d {
                for e in 0..d {
                    info[q * d + e] = if q == e { eig.eigenvalues[e] } else { 0.0 };
                    self.vecs[q * d + e] = eig.eigenvectors[(q, e)];
                }
            }
        }
        let (mut lmin, mut lmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for q in 0..d {
            lmin = lmin.min(info[q * d + q]);
            lmax = lmax.max(info[q * d + q]);
        }
        if !(lmin > 0.0) || lmax / lmin > FISHER_CONDITION_LIMIT {
            s.copy_from_slice(nabla);
            return Ok(Scaling::Identity);
        }
        // s = V diag(lambda^{-1/2}) V' nabla, eigenvectors in the columns of V.
        for e in 0..d {
            let mut proj = 0.0;
            for q in 0..d {
                proj += self.vecs[q * d + e] * nabla[q];
            }
            self.proj[e] = proj / info[e * d + e].sqrt();
        }
        for q in 0..d {
            let mut v = 0.0;
            for e in 0..d {
                v += self.vecs[q * d + e] * self.proj[e];
            }
            s[q] = v;
        }
        Ok(Scaling::InverseSqrtFisher)
    }
}

/// Scaled score of the one-step predictive log density at observation `y`.
///
/// `xi_filtered_prev` is the filtered regime distribution at `t - 1` and `f`
/// the transition parameters at `t`.
pub fn gas_score(
    y: f64,
    xi_filtered_prev: &[f64],
    f: &[f64],
    params: &Params,
    spec: &ModelSpec,
) -> Result<ScaledScore> {
    params.validate(spec)?;
    check_len("filtered probabilities", spec.k, xi_filtered_prev.len())?;
    let total: f64 = xi_filtered_prev.iter().sum();
    if (total - 1.0).abs() > 1e-8 || xi_filtered_prev.iter().any(|v| *v < 0.0) {
        return Err(Error::Input(format!("filtered probabilities sum to {total}")));
    }
    if !y.is_finite() {
        return Err(Error::Input(format!("observation is {y}")));
    }
    let p = link::link_f_to_matrix(f, spec)?;
    let k = spec.k;
    let d = spec.n_transition();
    let mut jac = vec![0.0; d * k];
    link::fill_jacobian(spec, p.as_slice(), &mut jac);
    let w: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| xi_filtered_prev[i] * p.get(i, j)).sum())
        .collect();
    let mut ctx = ScoreContext::new(spec, params);
    let mut nabla = vec![0.0; d];
    let mut s = vec![0.0; d];
    let mut fisher = Vec::with_capacity(d * d);
    let scaling_used = ctx.score(
        0,
        y,
        xi_filtered_prev,
        &jac,
        &w,
        true,
        &mut nabla,
        &mut s,
        Some(&mut fisher),
        spec,
    )?;
    Ok(ScaledScore {
        nabla,
        s,
        fisher,
        scaling_used,
    })
}
