//! Simulation from any specification and the Monte Carlo design presets.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dynamics::{self, log_density, ScoreContext, SCORE_FALLBACK_THRESHOLD};
use crate::error::{Error, Result};
use crate::link::{self, fill_jacobian, fill_matrix, matrix_from_free_probabilities, TransitionMatrix};
use crate::model::{Coefficients, Dynamics, ModelSpec, Parameterization, Params, VarianceStructure};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub y: Vec<f64>,
    /// True regimes, 0-based.
    pub z: Vec<usize>,
    pub pi_true_path: Vec<TransitionMatrix>,
    pub x: Option<Vec<f64>>,
    pub seed: u64,
}

impl SimOutput {
    pub fn dataset(&self, label: impl Into<String>) -> Dataset {
        Dataset {
            y: self.y.clone(),
            x: self.x.clone(),
            label: label.into(),
        }
    }

    /// Columns `t, y, z` and `x` when present; `t` and `z` are 1-based.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        match &self.x {
            Some(_) => writeln!(w, "t,y,z,x")?,
            None => writeln!(w, "t,y,z")?,
        }
        for t in 0..self.y.len() {
            write!(w, "{},{},{}", t + 1, self.y[t], self.z[t] + 1)?;
            if let Some(x) = &self.x {
                write!(w, ",{}", x[t])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn draw_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

/// Simulates `burn_in + t_len` periods and keeps the last `t_len`.
///
/// The first regime is uniform; afterwards `z_t` is drawn from row
/// `z_{t-1}` of `P_t`. Score-driven dynamics run the filter on the simulated
/// history at the true parameters, since the filter state is part of the
/// data-generating process. For exogenous dynamics a standard normal
/// covariate is generated when `x` is not supplied (it must otherwise cover
/// `burn_in + t_len` periods).
pub fn simulate(
    spec: &ModelSpec,
    params: &Params,
    t_len: usize,
    burn_in: usize,
    seed: u64,
    x: Option<&[f64]>,
) -> Result<SimOutput> {
    params.validate(spec)?;
    if t_len == 0 {
        return Err(Error::Input("T must be at least 1".into()));
    }
    let total = t_len + burn_in;
    let k = spec.k;
    let d = spec.n_transition();

    let mut rng = rng_from_seed(seed);
    let covariate: Option<Vec<f64>> = match (spec.dynamics, x) {
        (Dynamics::Exogenous, Some(x)) => {
            if x.len() != total {
                return Err(Error::Dimension {
                    what: "exogenous series (T + burn-in)",
                    expected: total,
                    got: x.len(),
                });
            }
            Some(x.to_vec())
        }
        (Dynamics::Exogenous, None) => {
            let mut crng = rng.clone();
            crng.set_stream(1);
            Some((0..total).map(|_| crng.sample(StandardNormal)).collect())
        }
        _ => None,
    };

    let score_active = spec.dynamics == Dynamics::Score
        && !dynamics::gas_fallback_active(params, SCORE_FALLBACK_THRESHOLD);
    let mut ctx = score_active.then(|| ScoreContext::new(spec, params));
    let var: Vec<f64> = (0..k).map(|j| params.sigma2_of(j)).collect();
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();

    let mut f = params.f0.clone();
    let mut f_next = vec![0.0; d];
    let mut pmat = vec![0.0; k * k];
    let mut jac = vec![0.0; d * k];
    let mut xi_prev = vec![1.0 / k as f64; k];
    let mut xi_pred = vec![0.0; k];
    let mut xi_filt = vec![0.0; k];
    let mut nabla = vec![0.0; d];
    let mut s = vec![0.0; d];

    let mut ys = Vec::with_capacity(total);
    let mut zs = Vec::with_capacity(total);
    let mut path = Vec::with_capacity(total);
    let uniform = vec![1.0 / k as f64; k];

    for t in 0..total {
        if t > 0 {
            match &params.coef {
                Coefficients::Lagged { theta } => {
                    for q in 0..d {
                        f[q] = params.f0[q] + theta[q] * ys[t - 1];
                    }
                }
                Coefficients::Exogenous { gamma } => {
                    let lag = covariate.as_ref().expect("covariate generated above")[t - 1];
                    for q in 0..d {
                        f[q] = params.f0[q] + gamma[q] * lag;
                    }
                }
                _ => {}
            }
        }
        fill_matrix(spec, &f, &mut pmat);

        let z = if t == 0 {
            draw_index(&mut rng, &uniform)
        } else {
            let prev = zs[t - 1];
            draw_index(&mut rng, &pmat[prev * k..(prev + 1) * k])
        };
        let e: f64 = rng.sample(StandardNormal);
        let y = params.mu[z] + sd[z] * e;
        ys.push(y);
        zs.push(z);
        path.push(TransitionMatrix::from_raw(k, pmat.clone()));

        if let (Some(ctx), Coefficients::Score { a, b }) = (ctx.as_mut(), &params.coef) {
            for j in 0..k {
                xi_pred[j] = (0..k).map(|i| xi_prev[i] * pmat[i * k + j]).sum();
            }
            let mut sum = 0.0;
            let mx = (0..k).map(|j| log_density(y, params.mu[j], var[j])).fold(f64::NEG_INFINITY, f64::max);
            for j in 0..k {
                xi_filt[j] = xi_pred[j] * (log_density(y, params.mu[j], var[j]) - mx).exp();
                sum += xi_filt[j];
            }
            if sum > 0.0 && sum.is_finite() {
                xi_filt.iter_mut().for_each(|v| *v /= sum);
            } else {
                xi_filt.copy_from_slice(&xi_pred);
            }
            fill_jacobian(spec, &pmat, &mut jac);
            if ctx.score(t, y, &xi_prev, &jac, &xi_pred, false, &mut nabla, &mut s, None, spec).is_err() {
                s.iter_mut().for_each(|v| *v = 0.0);
            }
            dynamics::score_step(&params.f0, a, b, &f, &s, &mut f_next);
            std::mem::swap(&mut f, &mut f_next);
            std::mem::swap(&mut xi_prev, &mut xi_filt);
        }
    }

    Ok(SimOutput {
        y: ys.split_off(burn_in),
        z: zs.split_off(burn_in),
        pi_true_path: path.split_off(burn_in),
        x: covariate.map(|mut c| c.split_off(burn_in)),
        seed,
    })
}

/// Monte Carlo design: regime count, parameterization and dynamics of each
/// data-generating process, with the true parameters.
pub fn dgp_preset(id: u32) -> Result<(ModelSpec, Params)> {
    use Dynamics::*;
    let (k, param, var, dynamics) = match id {
        1 => (2, Parameterization::Diagonal, VarianceStructure::Common, Constant),
        2 => (2, Parameterization::Diagonal, VarianceStructure::Common, Lagged),
        3 => (2, Parameterization::Diagonal, VarianceStructure::Common, Exogenous),
        4 => (2, Parameterization::Diagonal, VarianceStructure::Common, Score),
        5 => (2, Parameterization::OffDiagonal, VarianceStructure::RegimeSpecific, Lagged),
        6 => (3, Parameterization::OffDiagonal, VarianceStructure::RegimeSpecific, Constant),
        7 => (3, Parameterization::OffDiagonal, VarianceStructure::RegimeSpecific, Lagged),
        8 => (3, Parameterization::OffDiagonal, VarianceStructure::RegimeSpecific, Exogenous),
        9 => (3, Parameterization::OffDiagonal, VarianceStructure::RegimeSpecific, Score),
        other => return Err(Error::Input(format!("DGP id must be in 1..=9, got {other}"))),
    };
    let spec = ModelSpec::new(k, param, var, dynamics)?;
    let (mu, sigma2, baseline): (Vec<f64>, Vec<f64>, Vec<f64>) = match id {
        1..=4 => (vec![-1.0, 1.0], vec![0.5], vec![0.80, 0.90]),
        5 => (vec![-1.0, 1.0], vec![0.3, 0.7], vec![0.20, 0.15]),
        _ => (
            vec![-2.0, 0.0, 2.0],
            vec![0.3, 0.5, 0.8],
            vec![0.08, 0.08, 0.10, 0.10, 0.06, 0.06],
        ),
    };
    let pi0 = matrix_from_free_probabilities(&baseline, &spec)?;
    let f0 = link::link_matrix_to_f(&pi0, &spec)?;
    let coef = match id {
        1 | 6 => Coefficients::None,
        2 => Coefficients::Lagged { theta: vec![0.15, -0.10] },
        3 => Coefficients::Exogenous { gamma: vec![0.20, -0.20] },
        4 => Coefficients::Score {
            a: vec![0.10, -0.10],
            b: vec![0.90, 0.85],
        },
        5 => Coefficients::Lagged { theta: vec![0.10, -0.10] },
        7 => Coefficients::Lagged {
            theta: vec![0.05, -0.03, 0.04, -0.04, 0.03, -0.05],
        },
        8 => Coefficients::Exogenous {
            gamma: vec![0.08, -0.04, 0.05, -0.06, 0.04, -0.07],
        },
        9 => Coefficients::Score {
            a: vec![0.03; 6],
            b: vec![0.85; 6],
        },
        _ => unreachable!(),
    };
    let params = Params {
        mu,
        sigma2,
        f0,
        coef,
    };
    params.validate(&spec)?;
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn presets_match_the_design_table() {
        let (spec, p) = dgp_preset(2).unwrap();
        assert_eq!(spec.k, 2);
        assert_eq!(p.mu, vec![-1.0, 1.0]);
        assert_eq!(p.sigma2, vec![0.5]);
        assert_eq!(p.coef, Coefficients::Lagged { theta: vec![0.15, -0.10] });
        let pi = link::link_f_to_matrix(&p.f0, &spec).unwrap();
        assert_abs_diff_eq!(pi.get(0, 0), 0.80, epsilon = 1e-12);
        assert_abs_diff_eq!(pi.get(1, 1), 0.90, epsilon = 1e-12);

        let (spec, p) = dgp_preset(5).unwrap();
        assert_eq!(spec.parameterization, Parameterization::OffDiagonal);
        assert_eq!(p.sigma2, vec![0.3, 0.7]);
        let pi = link::link_f_to_matrix(&p.f0, &spec).unwrap();
        assert_abs_diff_eq!(pi.get(0, 1), 0.20, epsilon = 1e-12);
        assert_abs_diff_eq!(pi.get(1, 0), 0.15, epsilon = 1e-12);

        let (spec, p) = dgp_preset(6).unwrap();
        let pi = link::link_f_to_matrix(&p.f0, &spec).unwrap();
        let free = link::free_probabilities(&pi, &spec);
        for (a, b) in free.iter().zip([0.08, 0.08, 0.10, 0.10, 0.06, 0.06]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(p.sigma2, vec![0.3, 0.5, 0.8]);

        let (_, p) = dgp_preset(8).unwrap();
        assert_eq!(
            p.coef,
            Coefficients::Exogenous { gamma: vec![0.08, -0.04, 0.05, -0.06, 0.04, -0.07] }
        );
        let (_, p) = dgp_preset(9).unwrap();
        assert_eq!(p.coef, Coefficients::Score { a: vec![0.03; 6], b: vec![0.85; 6] });
        assert!(dgp_preset(0).is_err());
        assert!(dgp_preset(10).is_err());
    }

    #[test]
    fn same_seed_same_output() {
        for id in [1, 3, 4, 9] {
            let (spec, p) = dgp_preset(id).unwrap();
            let a = simulate(&spec, &p, 200, 50, 42, None).unwrap();
            let b = simulate(&spec, &p, 200, 50, 42, None).unwrap();
            assert_eq!(a, b);
            let c = simulate(&spec, &p, 200, 50, 43, None).unwrap();
            assert_ne!(a.y, c.y);
            assert_eq!(a.y.len(), 200);
            assert_eq!(a.x.is_some(), spec.dynamics == Dynamics::Exogenous);
        }
    }

    #[test]
    fn vanishing_noise_reproduces_the_means() {
        let (spec, mut p) = dgp_preset(6).unwrap();
        p.sigma2 = vec![1e-12; 3];
        let sim = simulate(&spec, &p, 300, 10, 5, None).unwrap();
        for (y, z) in sim.y.iter().zip(&sim.z) {
            assert!((y - p.mu[*z]).abs() < 1e-5);
        }
    }

    #[test]
    fn supplied_covariate_must_cover_burn_in() {
        let (spec, p) = dgp_preset(3).unwrap();
        assert!(simulate(&spec, &p, 10, 5, 1, Some(&[0.0; 10])).is_err());
        let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        let sim = simulate(&spec, &p, 10, 5, 1, Some(&x)).unwrap();
        assert_eq!(sim.x.unwrap(), x[5..].to_vec());
    }

    #[test]
    fn score_paths_move_and_stay_valid() {
        let (spec, p) = dgp_preset(4).unwrap();
        let sim = simulate(&spec, &p, 500, 100, 11, None).unwrap();
        let first = sim.pi_true_path[0].get(0, 0);
        assert!(sim.pi_true_path.iter().any(|m| (m.get(0, 0) - first).abs() > 1e-3));
        for m in &sim.pi_true_path {
            for i in 0..2 {
                assert_abs_diff_eq!(m.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }
}
