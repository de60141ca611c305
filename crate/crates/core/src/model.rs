//! Model specification and parameter containers.
//!
//! Transition parameters are stored in "free entry" order. Under the diagonal
//! parameterization (two regimes only) entry `i` is the staying probability
//! `P[i][i]`. Under the off-diagonal parameterization the entries run row by
//! row over the off-diagonal cells, so for three regimes the order is
//! `(1,2) (1,3) (2,1) (2,3) (3,1) (3,2)`. The diagonal cell of each row is the
//! reference category of that row's multinomial logit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// One logit per row for the staying probability; two regimes only.
    Diagonal,
    /// Multinomial logit over the `K - 1` off-diagonal cells of each row.
    OffDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceStructure {
    Common,
    RegimeSpecific,
}

/// How the transition parameters move through time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// `f_t = f0`.
    Constant,
    /// `f_t = alpha + theta * y_{t-1}`.
    Lagged,
    /// `f_t = beta + gamma * x_{t-1}`.
    Exogenous,
    /// Score driven: `f_t = omega + A s_{t-1} + B (f_{t-1} - omega)`.
    Score,
}

impl Dynamics {
    pub const ALL: [Dynamics; 4] = [
        Dynamics::Constant,
        Dynamics::Lagged,
        Dynamics::Exogenous,
        Dynamics::Score,
    ];

    /// Short label used in tables and file names.
    pub fn label(self) -> &'static str {
        match self {
            Dynamics::Constant => "const",
            Dynamics::Lagged => "tvp",
            Dynamics::Exogenous => "exog",
            Dynamics::Score => "gas",
        }
    }
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Dynamics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "const" | "constant" => Ok(Dynamics::Constant),
            "tvp" | "lagged" | "i" | "model1" => Ok(Dynamics::Lagged),
            "exog" | "exogenous" | "ii" | "model2" => Ok(Dynamics::Exogenous),
            "gas" | "score" | "iii" | "model3" => Ok(Dynamics::Score),
            other => Err(Error::Input(format!("unknown dynamics '{other}'"))),
        }
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diag" | "diagonal" => Ok(Parameterization::Diagonal),
            "offdiag" | "off-diagonal" | "off_diagonal" | "offdiagonal" => {
                Ok(Parameterization::OffDiagonal)
            }
            other => Err(Error::Input(format!("unknown parameterization '{other}'"))),
        }
    }
}

impl FromStr for VarianceStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "common" | "equal" => Ok(VarianceStructure::Common),
            "regime" | "regime-specific" | "regime_specific" | "specific" => {
                Ok(VarianceStructure::RegimeSpecific)
            }
            other => Err(Error::Input(format!("unknown variance structure '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub k: usize,
    pub parameterization: Parameterization,
    pub variance: VarianceStructure,
    pub dynamics: Dynamics,
}

impl ModelSpec {
    pub fn new(
        k: usize,
        parameterization: Parameterization,
        variance: VarianceStructure,
        dynamics: Dynamics,
    ) -> Result<Self> {
        let spec = ModelSpec {
            k,
            parameterization,
            variance,
            dynamics,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A one-regime Gaussian model. It is the degenerate reduction used by
    /// closed-form checks and carries no transition parameters.
    pub fn single_regime() -> Self {
        ModelSpec {
            k: 1,
            parameterization: Parameterization::OffDiagonal,
            variance: VarianceStructure::Common,
            dynamics: Dynamics::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 1 {
            if self.parameterization == Parameterization::OffDiagonal
                && self.dynamics == Dynamics::Constant
            {
                return Ok(());
            }
            return Err(Error::Parameter(
                "a single regime is only supported as the constant off-diagonal reduction".into(),
            ));
        }
        if self.k < 2 {
            return Err(Error::Parameter(format!("K must be at least 2, got {}", self.k)));
        }
        if self.parameterization == Parameterization::Diagonal && self.k != 2 {
            return Err(Error::Parameter(format!(
                "diagonal parameterization requires K = 2, got K = {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Length of the transition parameter vector `f`.
    pub fn n_transition(&self) -> usize {
        match self.parameterization {
            Parameterization::Diagonal => self.k,
            Parameterization::OffDiagonal => self.k * (self.k - 1),
        }
    }

    pub fn n_variances(&self) -> usize {
        match self.variance {
            VarianceStructure::Common => 1,
            VarianceStructure::RegimeSpecific => self.k,
        }
    }

    pub fn n_coefficients(&self) -> usize {
        let d = self.n_transition();
        match self.dynamics {
            Dynamics::Constant => 0,
            Dynamics::Lagged | Dynamics::Exogenous => d,
            Dynamics::Score => 2 * d,
        }
    }

    /// Total number of free parameters.
    pub fn n_params(&self) -> usize {
        self.k + self.n_variances() + self.n_transition() + self.n_coefficients()
    }

    /// Matrix cell `(row, col)` addressed by free transition parameter `p`.
    pub fn free_entry(&self, p: usize) -> (usize, usize) {
        match self.parameterization {
            Parameterization::Diagonal => (p, p),
            Parameterization::OffDiagonal => {
                let row = p / (self.k - 1);
                let c = p % (self.k - 1);
                (row, if c < row { c } else { c + 1 })
            }
        }
    }

    /// Inverse of [`free_entry`](Self::free_entry); `None` for cells that are
    /// not free parameters.
    pub fn free_index(&self, row: usize, col: usize) -> Option<usize> {
        match self.parameterization {
            Parameterization::Diagonal => (row == col).then_some(row),
            Parameterization::OffDiagonal => {
                if row == col {
                    None
                } else {
                    let c = if col < row { col } else { col - 1 };
                    Some(row * (self.k - 1) + c)
                }
            }
        }
    }

    pub fn with_dynamics(&self, dynamics: Dynamics) -> Self {
        ModelSpec { dynamics, ..*self }
    }

    /// Names of the natural-scale parameters in [`Params::to_vec`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_params());
        for i in 0..self.k {
            names.push(format!("mu[{}]", i + 1));
        }
        match self.variance {
            VarianceStructure::Common => names.push("sigma2".into()),
            VarianceStructure::RegimeSpecific => {
                for i in 0..self.k {
                    names.push(format!("sigma2[{}]", i + 1));
                }
            }
        }
        let cell = |p: usize| {
            let (i, j) = self.free_entry(p);
            format!("{},{}", i + 1, j + 1)
        };
        let d = self.n_transition();
        for p in 0..d {
            names.push(format!("f0[{}]", cell(p)));
        }
        let coef: &[&str] = match self.dynamics {
            Dynamics::Constant => &[],
            Dynamics::Lagged => &["theta"],
            Dynamics::Exogenous => &["gamma"],
            Dynamics::Score => &["A", "B"],
        };
        for name in coef {
            for p in 0..d {
                names.push(format!("{name}[{}]", cell(p)));
            }
        }
        names
    }
}

/// Dynamics coefficients, matching [`Dynamics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficients {
    None,
    Lagged { theta: Vec<f64> },
    Exogenous { gamma: Vec<f64> },
    Score { a: Vec<f64>, b: Vec<f64> },
}

impl Coefficients {
    pub fn dynamics(&self) -> Dynamics {
        match self {
            Coefficients::None => Dynamics::Constant,
            Coefficients::Lagged { .. } => Dynamics::Lagged,
            Coefficients::Exogenous { .. } => Dynamics::Exogenous,
            Coefficients::Score { .. } => Dynamics::Score,
        }
    }

    /// Zero coefficients for the given dynamics. `B` is set to 0.5 since it
    /// has to lie inside (0, 1).
    pub fn zeros(dynamics: Dynamics, d: usize) -> Self {
        match dynamics {
            Dynamics::Constant => Coefficients::None,
            Dynamics::Lagged => Coefficients::Lagged { theta: vec![0.0; d] },
            Dynamics::Exogenous => Coefficients::Exogenous { gamma: vec![0.0; d] },
            Dynamics::Score => Coefficients::Score {
                a: vec![0.0; d],
                b: vec![0.5; d],
            },
        }
    }

    /// The slope block reported as the "A" group: `theta`, `gamma` or `A`.
    pub fn slope(&self) -> Option<&[f64]> {
        match self {
            Coefficients::None => None,
            Coefficients::Lagged { theta } => Some(theta),
            Coefficients::Exogenous { gamma } => Some(gamma),
            Coefficients::Score { a, .. } => Some(a),
        }
    }
}

/// Natural-scale model parameters.
///
/// For score-driven dynamics `f0` holds `omega`, the unconditional mean of
/// the transition parameters and the filter's starting value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub f0: Vec<f64>,
    pub coef: Coefficients,
}

impl Params {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        check_len("mu", spec.k, self.mu.len())?;
        check_len("sigma2", spec.n_variances(), self.sigma2.len())?;
        let d = spec.n_transition();
        check_len("f0", d, self.f0.len())?;
        if self.coef.dynamics() != spec.dynamics {
            return Err(Error::Parameter(format!(
                "coefficients are for '{}' dynamics but the spec says '{}'",
                self.coef.dynamics(),
                spec.dynamics
            )));
        }
        if let Some(bad) = self.mu.iter().chain(&self.f0).find(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite mean or intercept {bad}")));
        }
        for (i, &s) in self.sigma2.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("sigma2[{}] = {s} must be positive", i + 1)));
            }
        }
        match &self.coef {
            Coefficients::None => {}
            Coefficients::Lagged { theta: v } | Coefficients::Exogenous { gamma: v } => {
                check_len("slope coefficients", d, v.len())?;
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Parameter("non-finite slope coefficient".into()));
                }
            }
            Coefficients::Score { a, b } => {
                check_len("A", d, a.len())?;
                check_len("B", d, b.len())?;
                if a.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Parameter("non-finite score coefficient A".into()));
                }
                if let Some(bad) = b.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
                    return Err(Error::Parameter(format!("B entry {bad} outside (0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Variance of regime `j`.
    #[inline]
    pub fn sigma2_of(&self, j: usize) -> f64 {
        if self.sigma2.len() == 1 {
            self.sigma2[0]
        } else {
            self.sigma2[j]
        }
    }

    /// Flatten to `[mu, sigma2, f0, coefficients]`, the order of
    /// [`ModelSpec::param_names`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.mu);
        v.extend_from_slice(&self.sigma2);
        v.extend_from_slice(&self.f0);
        match &self.coef {
            Coefficients::None => {}
            Coefficients::Lagged { theta } => v.extend_from_slice(theta),
            Coefficients::Exogenous { gamma } => v.extend_from_slice(gamma),
            Coefficients::Score { a, b } => {
                v.extend_from_slice(a);
                v.extend_from_slice(b);
            }
        }
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec). Does not validate ranges.
    pub fn from_vec(spec: &ModelSpec, v: &[f64]) -> Result<Self> {
        check_len("parameter vector", spec.n_params(), v.len())?;
        let k = spec.k;
        let nv = spec.n_variances();
        let d = spec.n_transition();
        let mut at = 0;
        let mut take = |n: usize| {
            let s = v[at..at + n].to_vec();
            at += n;
            s
        };
        let mu = take(k);
        let sigma2 = take(nv);
        let f0 = take(d);
        let coef = match spec.dynamics {
            Dynamics::Constant => Coefficients::None,
            Dynamics::Lagged => Coefficients::Lagged { theta: take(d) },
            Dynamics::Exogenous => Coefficients::Exogenous { gamma: take(d) },
            Dynamics::Score => {
                let a = take(d);
                let b = take(d);
                Coefficients::Score { a, b }
            }
        };
        Ok(Params {
            mu,
            sigma2,
            f0,
            coef,
        })
    }
}
