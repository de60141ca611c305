//! Quasi-Newton minimization with finite-difference derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Relative step for central first differences, `eps^(1/3)`.
pub fn gradient_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Relative step for second differences from function values, `eps^(1/4)`.
pub fn hessian_step(x: f64) -> f64 {
    f64::EPSILON.powf(0.25) * x.abs().max(1.0)
}

/// Central-difference gradient. Falls back to a one-sided difference when one
/// of the two probes is not finite.
pub fn numerical_gradient(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], fx: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = gradient_step(x[i]);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let dn = f(&probe);
            probe[i] = x[i];
            match (up.is_finite(), dn.is_finite()) {
                (true, true) => (up - dn) / (2.0 * h),
                (true, false) => (up - fx) / h,
                (false, true) => (fx - dn) / h,
                (false, false) => f64::NAN,
            }
        })
        .collect()
}

/// Central-difference Hessian from function values. `None` if any probe is
/// not finite.
pub fn numerical_hessian(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64]) -> Option<DMatrix<f64>> {
    let n = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return None;
    }
    let h: Vec<f64> = x.iter().map(|v| hessian_step(*v)).collect();
    let mut hess = DMatrix::zeros(n, n);
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h[i];
        let up = f(&p);
        p[i] = x[i] - h[i];
        let dn = f(&p);
        p[i] = x[i];
        if !(up.is_finite() && dn.is_finite()) {
            return None;
        }
        hess[(i, i)] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
    }
    for i in 0..n {
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                p[i] = x[i] + si * h[i];
                p[j] = x[j] + sj * h[j];
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let pp = eval(1.0, 1.0);
            let pm = eval(1.0, -1.0);
            let mp = eval(-1.0, 1.0);
            let mm = eval(-1.0, -1.0);
            if !(pp.is_finite() && pm.is_finite() && mp.is_finite() && mm.is_finite()) {
                return None;
            }
            let v = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Some(hess)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailed,
    NonFiniteStart,
    NonFiniteGradient,
}

impl OptimStatus {
    /// Whether the optimizer itself considers the run successful.
    pub fn is_success(self) -> bool {
        matches!(self, OptimStatus::GradientTolerance | OptimStatus::FunctionTolerance)
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub gtol: f64,
    /// Relative objective decrease counted as stalled.
    pub ftol: f64,
    /// Consecutive stalled iterations before stopping.
    pub stall_iters: usize,
    /// Largest coordinate move per iteration.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            gtol: 1e-4,
            ftol: 1e-12,
            stall_iters: 5,
            max_step: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub fx: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub status: OptimStatus,
}

impl OptimOutcome {
    pub fn grad_inf_norm(&self) -> f64 {
        self.grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()))
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, g| if g.is_nan() { f64::NAN } else { m.max(g.abs()) })
}

/// BFGS on the inverse Hessian with an Armijo backtracking line search.
/// The objective signals infeasible points by returning a non-finite value.
pub fn minimize_bfgs(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: &BfgsOptions) -> OptimOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return OptimOutcome {
            x,
            fx,
            grad: vec![f64::NAN; n],
            iterations: 0,
            status: OptimStatus::NonFiniteStart,
        };
    }
    let mut g = numerical_gradient(&mut f, &x, fx);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut stalled = 0;
    let c1 = 1e-4;

    for iter in 0..opts.max_iter {
        let gn = inf_norm(&g);
        if gn.is_nan() {
            return OptimOutcome { x, fx, grad: g, iterations: iter, status: OptimStatus::NonFiniteGradient };
        }
        if gn < opts.gtol {
            return OptimOutcome { x, fx, grad: g, iterations: iter, status: OptimStatus::GradientTolerance };
        }

        let gv = DVector::from_column_slice(&g);
        let mut p = -(&h_inv * &gv);
        let mut slope = gv.dot(&p);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            p = -gv.clone();
            slope = gv.dot(&p);
        }
        let pmax = p.amax();
        if pmax > opts.max_step {
            p *= opts.max_step / pmax;
            slope = gv.dot(&p);
        }

        // Armijo backtracking with safeguarded quadratic interpolation.
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut trial = vec![0.0; n];
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = x[i] + alpha * p[i];
            }
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + c1 * alpha * slope {
                accepted = Some(ft);
                break;
            }
            let next = if ft.is_finite() {
                let denom = 2.0 * (ft - fx - slope * alpha);
                if denom > 0.0 {
                    (-slope * alpha * alpha / denom).clamp(0.1 * alpha, 0.5 * alpha)
                } else {
                    0.5 * alpha
                }
            } else {
                0.2 * alpha
            };
            alpha = next;
            if alpha * pmax.min(opts.max_step) < 1e-16 * (1.0 + inf_norm(&x)) {
                break;
            }
        }
        let Some(f_new) = accepted else {
            if !fresh {
                h_inv = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            return OptimOutcome { x, fx, grad: g, iterations: iter, status: OptimStatus::LineSearchFailed };
        };

        let g_new = numerical_gradient(&mut f, &trial, f_new);
        let s = DVector::from_iterator(n, trial.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(n, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy.is_finite() && sy > 1e-10 * s.norm() * yv.norm() {
            if fresh {
                h_inv *= sy / yv.dot(&yv);
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h_inv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }

        let decrease = fx - f_new;
        if decrease <= opts.ftol * (fx.abs() + f_new.abs() + 1e-10) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        x.copy_from_slice(&trial);
        fx = f_new;
        g = g_new;
        if stalled >= opts.stall_iters {
            let status = if inf_norm(&g) < opts.gtol {
                OptimStatus::GradientTolerance
            } else {
                OptimStatus::FunctionTolerance
            };
            return OptimOutcome { x, fx, grad: g, iterations: iter + 1, status };
        }
    }
    let status = if inf_norm(&g) < opts.gtol {
        OptimStatus::GradientTolerance
    } else {
        OptimStatus::MaxIterations
    };
    OptimOutcome { x, fx, grad: g, iterations: opts.max_iter, status }
}
