//! Maps between natural parameters and the unconstrained optimizer space.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::link::{logistic, logit};
use crate::model::{Dynamics, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Positive reals, `u = ln x`.
    Log,
    /// The unit interval, `u = ln(x / (1 - x))`.
    Logit,
}

impl Transform {
    pub fn forward(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Logit => logit(x),
        }
    }

    pub fn inverse(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logit => logistic(u),
        }
    }

    /// Derivative of [`inverse`](Self::inverse) at `u`.
    pub fn inverse_derivative(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => u.exp(),
            Transform::Logit => {
                let p = logistic(u);
                p * (1.0 - p)
            }
        }
    }
}

/// One transform per coordinate of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformMap {
    pub kinds: Vec<Transform>,
}

impl TransformMap {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Natural to unconstrained.
    pub fn forward(&self, natural: &[f64]) -> Result<Vec<f64>> {
        check_len("parameter vector", self.len(), natural.len())?;
        natural
            .iter()
            .zip(&self.kinds)
            .enumerate()
            .map(|(i, (&x, t))| {
                let u = t.forward(x);
                if u.is_finite() {
                    Ok(u)
                } else {
                    Err(Error::Domain { index: i, value: x })
                }
            })
            .collect()
    }

    /// Unconstrained to natural.
    pub fn inverse(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.kinds).map(|(&v, t)| t.inverse(v)).collect()
    }

    /// `d natural_k / d u_k` for every coordinate.
    pub fn jacobian_diag(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.kinds).map(|(&v, t)| t.inverse_derivative(v)).collect()
    }
}

/// Means, intercepts and slopes are unconstrained; variances go through
/// `log` and the GAS persistence `B` through `logit`.
pub fn transforms_for(spec: &ModelSpec) -> TransformMap {
    let d = spec.n_transition();
    let mut kinds = Vec::with_capacity(spec.n_params());
    kinds.extend(std::iter::repeat_n(Transform::Identity, spec.k));
    kinds.extend(std::iter::repeat_n(Transform::Log, spec.n_variances()));
    kinds.extend(std::iter::repeat_n(Transform::Identity, d));
    match spec.dynamics {
        Dynamics::Constant => {}
        Dynamics::Lagged | Dynamics::Exogenous => kinds.extend(std::iter::repeat_n(Transform::Identity, d)),
        Dynamics::Score => {
            kinds.extend(std::iter::repeat_n(Transform::Identity, d));
            kinds.extend(std::iter::repeat_n(Transform::Logit, d));
        }
    }
    TransformMap { kinds }
}
