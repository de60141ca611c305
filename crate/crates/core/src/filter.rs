//! Hamilton filter for every transition specification.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dynamics::{self, log_density, FPath, ScoreContext, SCORE_FALLBACK_THRESHOLD};
use crate::error::{Error, Result};
use crate::link::{fill_jacobian, fill_matrix, TransitionMatrix};
use crate::model::{Coefficients, Dynamics, ModelSpec, Params};

/// Per-period likelihoods below this are floored and flagged.
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    /// Sum of `log L_t` over `t > cutoff` (1-based).
    pub loglik: f64,
    /// `P(z_t = j | I_{t-1})`, one row per period.
    pub xi_pred: Vec<Vec<f64>>,
    /// `P(z_t = j | I_t)`.
    pub xi_filt: Vec<Vec<f64>>,
    pub pi_path: Vec<TransitionMatrix>,
    pub f_path: Vec<Vec<f64>>,
    pub pred_mean: Vec<f64>,
    pub pred_var: Vec<f64>,
    pub cutoff: usize,
    /// First period (0-based) whose likelihood had to be floored.
    pub degenerate_at: Option<usize>,
    /// Periods where the Fisher scaling was replaced by the identity.
    pub identity_scalings: usize,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.pred_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_mean.is_empty()
    }

    pub fn f_path(&self) -> FPath {
        FPath {
            f: self.f_path.clone(),
            pi: self.pi_path.clone(),
        }
    }
}

pub(crate) struct CoreSummary {
    pub loglik: f64,
    pub degenerate_at: Option<usize>,
    pub identity_scalings: usize,
}

struct Recorder {
    out: FilterOutput,
}

fn check_inputs(data: &Dataset, spec: &ModelSpec, params: &Params, cutoff: usize) -> Result<()> {
    params.validate(spec)?;
    check_data(data, spec, cutoff)
}

/// The series is usable for `spec`: finite, long enough for the cut-off,
/// and carrying a covariate exactly when the dynamics are exogenous.
pub(crate) fn check_data(data: &Dataset, spec: &ModelSpec, cutoff: usize) -> Result<()> {
    spec.validate()?;
    data.validate()?;
    if data.len() < cutoff + 2 {
        return Err(Error::Data(format!(
            "series of length {} is too short for cut-off {cutoff}",
            data.len()
        )));
    }
    match (spec.dynamics, &data.x) {
        (Dynamics::Exogenous, None) => Err(Error::Dimension {
            what: "exogenous series",
            expected: data.len(),
            got: 0,
        }),
        (Dynamics::Exogenous, Some(_)) => Ok(()),
        (_, Some(x)) => Err(Error::Dimension {
            what: "exogenous series (only the exogenous specification takes one)",
            expected: 0,
            got: x.len(),
        }),
        (_, None) => Ok(()),
    }
}

/// The recursion shared by [`run_filter`] and the likelihood-only path.
fn filter_core(
    data: &Dataset,
    spec: &ModelSpec,
    params: &Params,
    cutoff: usize,
    mut rec: Option<&mut Recorder>,
) -> CoreSummary {
    let k = spec.k;
    let d = spec.n_transition();
    let n = data.len();
    let y = &data.y;
    let var: Vec<f64> = (0..k).map(|j| params.sigma2_of(j)).collect();
    let log_norm: Vec<f64> = var.iter().map(|v| log_density(0.0, 0.0, *v)).collect();
    let half_prec: Vec<f64> = var.iter().map(|v| 0.5 / v).collect();
    let ln_floor = LIKELIHOOD_FLOOR.ln();

    let score_active = spec.dynamics == Dynamics::Score
        && !dynamics::gas_fallback_active(params, SCORE_FALLBACK_THRESHOLD);
    let (a, b): (&[f64], &[f64]) = match &params.coef {
        Coefficients::Score { a, b } => (a, b),
        _ => (&[], &[]),
    };
    let slope: &[f64] = match &params.coef {
        Coefficients::Lagged { theta } => theta,
        Coefficients::Exogenous { gamma } => gamma,
        _ => &[],
    };
    let driver: Option<&[f64]> = match spec.dynamics {
        Dynamics::Lagged => Some(y),
        Dynamics::Exogenous => data.x.as_deref(),
        _ => None,
    };
    let mut ctx = score_active.then(|| ScoreContext::new(spec, params));

    let mut f = params.f0.clone();
    let mut f_next = vec![0.0; d];
    let mut pmat = vec![0.0; k * k];
    let mut jac = vec![0.0; d * k];
    let mut xi_prev = vec![1.0 / k as f64; k];
    let mut xi_pred = vec![0.0; k];
    let mut xi_filt = vec![0.0; k];
    let mut log_eta = vec![0.0; k];
    let mut nabla = vec![0.0; d];
    let mut s = vec![0.0; d];

    let mut loglik = 0.0;
    let mut degenerate_at = None;
    let mut identity_scalings = 0;
    let time_varying = driver.is_some() || score_active;
    fill_matrix(spec, &f, &mut pmat);

    for t in 0..n {
        if let Some(drv) = driver {
            if t > 0 {
                let lag = drv[t - 1];
                for q in 0..d {
                    f[q] = params.f0[q] + slope[q] * lag;
                }
            }
        }
        if time_varying {
            fill_matrix(spec, &f, &mut pmat);
        }

        for j in 0..k {
            let mut v = 0.0;
            for i in 0..k {
                v += xi_prev[i] * pmat[i * k + j];
            }
            xi_pred[j] = v;
        }

        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            let z = y[t] - params.mu[j];
            log_eta[j] = log_norm[j] - half_prec[j] * z * z;
            mx = mx.max(log_eta[j]);
        }
        let mut sum = 0.0;
        for j in 0..k {
            let v = xi_pred[j] * (log_eta[j] - mx).exp();
            xi_filt[j] = v;
            sum += v;
        }
        let mut log_l = mx + sum.ln();
        if log_l.is_finite() && log_l >= ln_floor && sum > 0.0 {
            for v in xi_filt.iter_mut() {
                *v /= sum;
            }
        } else {
            log_l = ln_floor;
            degenerate_at.get_or_insert(t);
            xi_filt.copy_from_slice(&xi_pred);
        }
        if t >= cutoff {
            loglik += log_l;
        }

        if let Some(r) = rec.as_deref_mut() {
            let mean: f64 = (0..k).map(|j| xi_pred[j] * params.mu[j]).sum();
            let second: f64 = (0..k)
                .map(|j| xi_pred[j] * (var[j] + params.mu[j] * params.mu[j]))
                .sum();
            let o = &mut r.out;
            o.xi_pred.push(xi_pred.clone());
            o.xi_filt.push(xi_filt.clone());
            o.pi_path.push(TransitionMatrix::from_raw(k, pmat.clone()));
            o.f_path.push(f.clone());
            o.pred_mean.push(mean);
            // Clamp roundoff: the mixture variance is at least the smallest component variance.
            let min_var = var.iter().copied().fold(f64::INFINITY, f64::min);
            o.pred_var.push((second - mean * mean).max(min_var));
        }

        if let Some(ctx) = ctx.as_mut() {
            fill_jacobian(spec, &pmat, &mut jac);
            match ctx.score(t, y[t], &xi_prev, &jac, &xi_pred, false, &mut nabla, &mut s, None, spec) {
                Ok(scaling) => {
                    if scaling == dynamics::Scaling::Identity {
                        identity_scalings += 1;
                    }
                }
                Err(_) => {
                    degenerate_at.get_or_insert(t);
                    s.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            dynamics::score_step(&params.f0, a, b, &f, &s, &mut f_next);
            std::mem::swap(&mut f, &mut f_next);
        }

        std::mem::swap(&mut xi_prev, &mut xi_filt);
    }

    CoreSummary {
        loglik,
        degenerate_at,
        identity_scalings,
    }
}

/// Runs the Hamilton recursion and records every per-period quantity.
///
/// The filter starts from the uniform distribution. The first `cutoff`
/// likelihood terms propagate the recursion but are left out of `loglik`.
pub fn run_filter(data: &Dataset, spec: &ModelSpec, params: &Params, cutoff: usize) -> Result<FilterOutput> {
    check_inputs(data, spec, params, cutoff)?;
    let n = data.len();
    let mut rec = Recorder {
        out: FilterOutput {
            loglik: 0.0,
            xi_pred: Vec::with_capacity(n),
            xi_filt: Vec::with_capacity(n),
            pi_path: Vec::with_capacity(n),
            f_path: Vec::with_capacity(n),
            pred_mean: Vec::with_capacity(n),
            pred_var: Vec::with_capacity(n),
            cutoff,
            degenerate_at: None,
            identity_scalings: 0,
        },
    };
    let summary = filter_core(data, spec, params, cutoff, Some(&mut rec));
    let mut out = rec.out;
    out.loglik = summary.loglik;
    out.degenerate_at = summary.degenerate_at;
    out.identity_scalings = summary.identity_scalings;
    Ok(out)
}

/// Log-likelihood only, without storing the paths.
pub fn loglik(data: &Dataset, spec: &ModelSpec, params: &Params, cutoff: usize) -> Result<f64> {
    check_inputs(data, spec, params, cutoff)?;
    let s = filter_core(data, spec, params, cutoff, None);
    match s.degenerate_at {
        Some(t) => Err(Error::Degenerate { t }),
        None => Ok(s.loglik),
    }
}

/// Likelihood evaluation for the optimizer: non-finite or degenerate points
/// come back as `None`.
pub(crate) fn loglik_unchecked(data: &Dataset, spec: &ModelSpec, params: &Params, cutoff: usize) -> Option<f64> {
    let s = filter_core(data, spec, params, cutoff, None);
    (s.degenerate_at.is_none() && s.loglik.is_finite()).then_some(s.loglik)
}

/// Most probable regime per period (0-based), ties to the lowest index.
pub fn classify_regimes(out: &FilterOutput) -> Vec<usize> {
    out.xi_filt.iter().map(|row| argmax(row)).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
