//! Multi-start maximum likelihood.
//!
//! Each start is drawn at random, mapped to the unconstrained space of
//! [`transforms_for`] and handed to a BFGS run on the negative filter
//! log-likelihood. Starts run in parallel and are reduced deterministically:
//! the converged run with the largest log-likelihood wins, ties going to the
//! lower start index.

pub mod optim;
pub mod transform;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::filter::{check_data, loglik_unchecked};
use crate::link::{free_probabilities, link_f_to_matrix, link_jacobian, link_matrix_to_f, TransitionMatrix};
use crate::model::{Coefficients, Dynamics, ModelSpec, Params};
use crate::rng::{rng_from_seed, split_seed, Purpose};

pub use optim::{minimize_bfgs, BfgsOptions, OptimOutcome, OptimStatus};
pub use transform::{transforms_for, Transform, TransformMap};

/// Smallest admissible variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Gradient infinity-norm below which a run counts as converged.
pub const CONVERGENCE_GTOL: f64 = 1e-4;
const MAX_REDRAWS: usize = 20;

/// Negative log-likelihood on the unconstrained scale. Points outside the
/// admissible region evaluate to `+inf`.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub data: &'a Dataset,
    pub spec: ModelSpec,
    pub cutoff: usize,
    pub map: TransformMap,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a Dataset, spec: &ModelSpec, cutoff: usize) -> Self {
        Objective {
            data,
            spec: *spec,
            cutoff,
            map: transforms_for(spec),
        }
    }

    pub fn params(&self, u: &[f64]) -> Option<Params> {
        let nat = self.map.inverse(u);
        let k = self.spec.k;
        let nv = self.spec.n_variances();
        if nat[k..k + nv].iter().any(|s| !(*s >= VARIANCE_FLOOR && s.is_finite())) {
            return None;
        }
        if nat.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let p = Params::from_vec(&self.spec, &nat).ok()?;
        if let Coefficients::Score { b, .. } = &p.coef {
            if b.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return None;
            }
        }
        Some(p)
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        self.params(u)
            .and_then(|p| loglik_unchecked(self.data, &self.spec, &p, self.cutoff))
            .map_or(f64::INFINITY, |l| -l)
    }

    pub fn to_unconstrained(&self, params: &Params) -> Result<Vec<f64>> {
        self.map.forward(&params.to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub n_starts: usize,
    pub seed: u64,
    pub cutoff: usize,
    pub bfgs: BfgsOptions,
    pub compute_se: bool,
    /// Run the starts on the rayon pool.
    pub parallel: bool,
}

impl EstimateOptions {
    pub fn new(n_starts: usize, seed: u64, cutoff: usize) -> Self {
        EstimateOptions {
            n_starts,
            seed,
            cutoff,
            bfgs: BfgsOptions {
                gtol: CONVERGENCE_GTOL,
                ..BfgsOptions::default()
            },
            compute_se: true,
            parallel: true,
        }
    }
}

/// Outcome of one start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub index: usize,
    /// `None` when no finite starting point was found.
    pub loglik: Option<f64>,
    pub converged: bool,
    pub status: OptimStatus,
    pub iterations: usize,
    pub grad_norm: Option<f64>,
    pub redraws: usize,
    /// Final point of the run.
    pub params: Option<Params>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub spec: ModelSpec,
    pub params_hat: Params,
    /// Natural-scale standard errors, `None` when the Hessian is not
    /// positive definite.
    pub se: Option<Params>,
    /// Smallest Hessian eigenvalue when the standard errors are unavailable.
    pub se_min_eigenvalue: Option<f64>,
    /// Baseline probabilities addressed by the intercepts.
    pub pi_hat: Vec<f64>,
    pub pi_se: Option<Vec<f64>>,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub t_effective: usize,
    pub converged: bool,
    pub n_starts_converged: usize,
    pub best_start_index: usize,
    pub starts: Vec<StartRecord>,
}

impl EstimationResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn information_criteria(loglik: f64, n_params: usize, t_effective: usize) -> (f64, f64) {
    let p = n_params as f64;
    (2.0 * p - 2.0 * loglik, p * (t_effective as f64).ln() - 2.0 * loglik)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Random transition matrix with staying probabilities in (0.6, 0.95) and
/// the remaining mass split at random over the other cells.
fn random_transition_matrix(k: usize, rng: &mut impl Rng) -> TransitionMatrix {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let stay = rng.random_range(0.6..0.95);
            let w: Vec<f64> = (0..k).map(|j| if j == i { 0.0 } else { rng.random_range(0.2..1.0) }).collect();
            let total: f64 = w.iter().sum();
            (0..k)
                .map(|j| if j == i { stay } else { (1.0 - stay) * w[j] / total })
                .collect()
        })
        .collect();
    TransitionMatrix::from_rows(&rows).expect("rows sum to one")
}

/// Draws a starting point from the start distribution.
pub fn draw_start(data: &Dataset, spec: &ModelSpec, rng: &mut impl Rng) -> Params {
    let k = spec.k;
    let n = data.len() as f64;
    let mean = data.y.iter().sum::<f64>() / n;
    let var = (data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).max(1e-6);
    let sd = var.sqrt();
    let mut sorted = data.y.clone();
    sorted.sort_by(f64::total_cmp);
    let noise = Normal::new(0.0, 0.25 * sd).expect("positive sd");
    let mu = (0..k)
        .map(|j| quantile(&sorted, (j as f64 + 0.5) / k as f64) + noise.sample(rng))
        .collect();
    let sigma2 = (0..spec.n_variances()).map(|_| var * rng.random_range(0.3..1.5)).collect();
    let f0 = if k > 1 {
        link_matrix_to_f(&random_transition_matrix(k, rng), spec).expect("interior matrix")
    } else {
        Vec::new()
    };
    let d = spec.n_transition();
    let slope = Normal::new(0.0, 0.1).expect("positive sd");
    let mut draw_slopes = || (0..d).map(|_| slope.sample(rng)).collect::<Vec<f64>>();
    let coef = match spec.dynamics {
        Dynamics::Constant => Coefficients::None,
        Dynamics::Lagged => Coefficients::Lagged { theta: draw_slopes() },
        Dynamics::Exogenous => Coefficients::Exogenous { gamma: draw_slopes() },
        Dynamics::Score => {
            let a = draw_slopes();
            let b = (0..d).map(|_| rng.random_range(0.7..0.95)).collect();
            Coefficients::Score { a, b }
        }
    };
    Params { mu, sigma2, f0, coef }
}

struct StartRun {
    record: StartRecord,
    u: Option<Vec<f64>>,
}

fn run_start(obj: &Objective<'_>, index: usize, opts: &EstimateOptions) -> StartRun {
    let mut rng = rng_from_seed(split_seed(opts.seed, &[Purpose::Starts as u64, index as u64]));
    let mut start = None;
    let mut redraws = 0;
    for attempt in 0..=MAX_REDRAWS {
        let p = draw_start(obj.data, &obj.spec, &mut rng);
        if let Ok(u) = obj.to_unconstrained(&p) {
            if obj.value(&u).is_finite() {
                start = Some(u);
                redraws = attempt;
                break;
            }
        }
        redraws = attempt;
    }
    let Some(u0) = start else {
        return StartRun {
            record: StartRecord {
                index,
                loglik: None,
                converged: false,
                status: OptimStatus::NonFiniteStart,
                iterations: 0,
                grad_norm: None,
                redraws,
                params: None,
            },
            u: None,
        };
    };
    let out = minimize_bfgs(|u| obj.value(u), &u0, &opts.bfgs);
    let gn = out.grad_inf_norm();
    let ll = -out.fx;
    let converged = out.status.is_success() && gn < CONVERGENCE_GTOL && ll.is_finite();
    StartRun {
        record: StartRecord {
            index,
            loglik: ll.is_finite().then_some(ll),
            converged,
            status: out.status,
            iterations: out.iterations,
            grad_norm: gn.is_finite().then_some(gn),
            redraws,
            params: obj.params(&out.x),
        },
        u: Some(out.x),
    }
}

/// Index of the winning start: best converged run, or the best finite run
/// when none converged.
fn select_best(runs: &[StartRun]) -> Option<usize> {
    let pick = |require_converged: bool| {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in runs.iter().enumerate() {
            if require_converged && !r.record.converged {
                continue;
            }
            if let Some(ll) = r.record.loglik {
                if best.is_none_or(|(_, b)| ll > b) {
                    best = Some((i, ll));
                }
            }
        }
        best.map(|(i, _)| i)
    };
    pick(true).or_else(|| pick(false))
}

pub fn estimate(data: &Dataset, spec: &ModelSpec, n_starts: usize, seed: u64, cutoff: usize) -> Result<EstimationResult> {
    estimate_with(data, spec, &EstimateOptions::new(n_starts, seed, cutoff))
}

pub fn estimate_with(data: &Dataset, spec: &ModelSpec, opts: &EstimateOptions) -> Result<EstimationResult> {
    check_data(data, spec, opts.cutoff)?;
    if opts.n_starts == 0 {
        return Err(Error::Input("at least one start is required".into()));
    }
    let obj = Objective::new(data, spec, opts.cutoff);
    let runs: Vec<StartRun> = if opts.parallel {
        (0..opts.n_starts).into_par_iter().map(|i| run_start(&obj, i, opts)).collect()
    } else {
        (0..opts.n_starts).map(|i| run_start(&obj, i, opts)).collect()
    };
    let best = select_best(&runs).ok_or_else(|| {
        Error::Data(format!(
            "no start produced a finite likelihood for '{}' after {MAX_REDRAWS} redraws each",
            data.label
        ))
    })?;
    let u = runs[best].u.clone().expect("finite runs carry a point");
    let params_hat = obj.params(&u).expect("finite objective implies admissible point");
    let loglik = loglik_unchecked(data, spec, &params_hat, opts.cutoff).expect("finite at the optimum");
    let n_params = spec.n_params();
    let t_effective = data.len() - opts.cutoff;
    let (aic, bic) = information_criteria(loglik, n_params, t_effective);
    let pi_hat = baseline_probabilities(spec, &params_hat);

    let (se, pi_se, se_min_eigenvalue) = if opts.compute_se {
        match standard_errors(data, spec, &params_hat, opts.cutoff)? {
            SeOutcome::Available(s) => (Some(s.se), Some(s.pi_se), None),
            SeOutcome::Unavailable { min_eigenvalue } => (None, None, Some(min_eigenvalue)),
        }
    } else {
        (None, None, None)
    };
    let starts: Vec<StartRecord> = runs.into_iter().map(|r| r.record).collect();
    Ok(EstimationResult {
        spec: *spec,
        params_hat,
        se,
        se_min_eigenvalue,
        pi_hat,
        pi_se,
        loglik,
        aic,
        bic,
        n_params,
        t_effective,
        converged: starts[best].converged,
        n_starts_converged: starts.iter().filter(|s| s.converged).count(),
        best_start_index: best,
        starts,
    })
}

/// `link(f0)` at the free cells.
pub fn baseline_probabilities(spec: &ModelSpec, params: &Params) -> Vec<f64> {
    if spec.n_transition() == 0 {
        return Vec::new();
    }
    let p = link_f_to_matrix(&params.f0, spec).expect("intercepts have the spec's length");
    free_probabilities(&p, spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrors {
    pub se: Params,
    /// Delta-method errors of [`baseline_probabilities`].
    pub pi_se: Vec<f64>,
    /// Covariance of the unconstrained estimates.
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeOutcome {
    Available(StandardErrors),
    /// The Hessian is not positive definite (or could not be evaluated, in
    /// which case the eigenvalue is NaN).
    Unavailable { min_eigenvalue: f64 },
}

/// Standard errors from the finite-difference Hessian of the negative
/// log-likelihood in the unconstrained space, mapped to the natural scale by
/// the transform derivatives.
pub fn standard_errors(data: &Dataset, spec: &ModelSpec, params_hat: &Params, cutoff: usize) -> Result<SeOutcome> {
    params_hat.validate(spec)?;
    check_data(data, spec, cutoff)?;
    let obj = Objective::new(data, spec, cutoff);
    let u = obj.to_unconstrained(params_hat)?;
    let Some(h) = optim::numerical_hessian(&mut |x: &[f64]| obj.value(x), &u) else {
        return Ok(SeOutcome::Unavailable { min_eigenvalue: f64::NAN });
    };
    let Some(chol) = h.clone().cholesky() else {
        let min_eigenvalue = SymmetricEigen::new(h).eigenvalues.min();
        return Ok(SeOutcome::Unavailable { min_eigenvalue });
    };
    let cov = chol.inverse();
    let jac = obj.map.jacobian_diag(&u);
    let se_vec: Vec<f64> = (0..u.len()).map(|i| jac[i].abs() * cov[(i, i)].max(0.0).sqrt()).collect();
    let se = Params::from_vec(spec, &se_vec)?;

    let d = spec.n_transition();
    let mut pi_se = Vec::with_capacity(d);
    if d > 0 {
        let off = spec.k + spec.n_variances();
        let lj = link_jacobian(&params_hat.f0, spec)?;
        for p in 0..d {
            let (i, j) = spec.free_entry(p);
            let grad: Vec<f64> = (0..d).map(|q| if lj.row_of(q) == i { lj.d(q)[j] } else { 0.0 }).collect();
            let mut var = 0.0;
            for q in 0..d {
                for r in 0..d {
                    var += grad[q] * grad[r] * cov[(off + q, off + r)];
                }
            }
            pi_se.push(var.max(0.0).sqrt());
        }
    }
    Ok(SeOutcome::Available(StandardErrors { se, pi_se, covariance: cov }))
}
