//! Yield-change application: three-regime fits per maturity and model.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{difference, ingest_yields, YearMonth};
use crate::error::{Error, Result};
use crate::estimate::{estimate_with, EstimateOptions};
use crate::evaluation::apply_permutation;
use crate::filter::{classify_regimes, run_filter};
use crate::model::{Dynamics, ModelSpec, Parameterization, Params, VarianceStructure};
use crate::rng::split_seed;

/// Leading likelihood terms dropped from the yield fits. The published BIC
/// values correspond to 762 - 100 = 662 effective observations.
pub const DEFAULT_EMPIRICAL_CUTOFF: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConfig {
    pub yields: PathBuf,
    pub maturities: Vec<u32>,
    pub models: Vec<Dynamics>,
    pub n_starts: usize,
    pub seed: u64,
    pub cutoff: usize,
    pub date_range: Option<(YearMonth, YearMonth)>,
    pub k: usize,
}

impl EmpiricalConfig {
    pub fn new(yields: impl Into<PathBuf>, maturities: Vec<u32>, models: Vec<Dynamics>) -> Self {
        EmpiricalConfig {
            yields: yields.into(),
            maturities,
            models,
            n_starts: 10,
            seed: 1,
            cutoff: DEFAULT_EMPIRICAL_CUTOFF,
            date_range: None,
            k: 3,
        }
    }

    pub fn spec(&self, dynamics: Dynamics) -> Result<ModelSpec> {
        ModelSpec::new(self.k, Parameterization::OffDiagonal, VarianceStructure::RegimeSpecific, dynamics)
    }
}

/// One period of the filtered classification, regimes in variance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub date: YearMonth,
    /// Most probable regime, 1 = highest variance.
    pub regime_rank: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalFit {
    pub maturity: u32,
    pub model: Dynamics,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub n_params: usize,
    /// Parameters relabelled by decreasing variance.
    pub params: Option<Params>,
    pub converged: bool,
    pub n_starts_converged: usize,
    pub n_starts: usize,
    /// Largest `|slope|` of each converged start (score models: `|A|`).
    pub converged_max_abs_slope: Vec<f64>,
    pub classification: Vec<ClassificationRow>,
    pub error: Option<String>,
}

impl EmpiricalFit {
    /// Every converged start put all slopes below `tol`.
    pub fn slopes_collapsed(&self, tol: f64) -> bool {
        !self.converged_max_abs_slope.is_empty() && self.converged_max_abs_slope.iter().all(|v| *v < tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    /// Number of level observations per maturity.
    pub n_levels: usize,
    pub fits: Vec<EmpiricalFit>,
}

/// Order placing the highest-variance regime first, ties to the lower index.
pub fn variance_order(sigma2: &[f64], k: usize) -> Vec<usize> {
    let var = |j: usize| if sigma2.len() == 1 { sigma2[0] } else { sigma2[j] };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| var(b).total_cmp(&var(a)).then(a.cmp(&b)));
    order
}

pub fn run_empirical(cfg: &EmpiricalConfig) -> Result<EmpiricalReport> {
    if cfg.maturities.is_empty() || cfg.models.is_empty() {
        return Err(Error::Input("need at least one maturity and one model".into()));
    }
    let series = ingest_yields(&cfg.yields, &cfg.maturities, cfg.date_range)?;
    let n_levels = series.first().map_or(0, |s| s.levels.len());
    let cells: Vec<(usize, Dynamics)> = (0..series.len())
        .flat_map(|i| cfg.models.iter().map(move |&m| (i, m)))
        .collect();
    let fits = cells
        .into_par_iter()
        .map(|(i, model)| {
            let s = &series[i];
            fit_cell(cfg, s.maturity, &s.dates, &s.levels, model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmpiricalReport { n_levels, fits })
}

fn fit_cell(cfg: &EmpiricalConfig, maturity: u32, dates: &[YearMonth], levels: &[f64], model: Dynamics) -> Result<EmpiricalFit> {
    let spec = cfg.spec(model)?;
    let data = difference(levels, format!("{maturity}m"))?.for_dynamics(model)?;
    let mut fit = EmpiricalFit {
        maturity,
        model,
        loglik: None,
        aic: None,
        bic: None,
        n_params: spec.n_params(),
        params: None,
        converged: false,
        n_starts_converged: 0,
        n_starts: cfg.n_starts,
        converged_max_abs_slope: Vec::new(),
        classification: Vec::new(),
        error: None,
    };
    let mut opts = EstimateOptions::new(cfg.n_starts, split_seed(cfg.seed, &[maturity as u64, model as u64]), cfg.cutoff);
    opts.compute_se = false;
    let res = match estimate_with(&data, &spec, &opts) {
        Ok(r) => r,
        Err(e) => {
            fit.error = Some(e.to_string());
            return Ok(fit);
        }
    };
    let order = variance_order(&res.params_hat.sigma2, spec.k);
    let params = apply_permutation(&spec, &res.params_hat, &order);
    let out = run_filter(&data, &spec, &params, cfg.cutoff)?;
    fit.classification = classify_regimes(&out)
        .into_iter()
        .zip(&out.xi_filt)
        .zip(&dates[1..])
        .map(|((z, xi), &date)| ClassificationRow {
            date,
            regime_rank: z + 1,
            probabilities: xi.clone(),
        })
        .collect();
    fit.converged_max_abs_slope = res
        .starts
        .iter()
        .filter(|s| s.converged)
        .filter_map(|s| s.params.as_ref()?.coef.slope().map(|v| v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))))
        .collect();
    fit.loglik = Some(res.loglik);
    fit.aic = Some(res.aic);
    fit.bic = Some(res.bic);
    fit.params = Some(params);
    fit.converged = res.converged;
    fit.n_starts_converged = res.n_starts_converged;
    Ok(fit)
}

impl EmpiricalReport {
    pub fn fit(&self, maturity: u32, model: Dynamics) -> Option<&EmpiricalFit> {
        self.fits.iter().find(|f| f.maturity == maturity && f.model == model)
    }

    /// Writes `empirical_fits.csv`, `empirical_report.json` and one
    /// `classification_<maturity>m_<model>.csv` per fit into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let k = self
            .fits
            .iter()
            .find_map(|f| f.params.as_ref().map(|p| p.mu.len()))
            .unwrap_or(0);
        let mut w = csv::Writer::from_path(dir.join("empirical_fits.csv"))?;
        let mut header: Vec<String> = ["maturity", "model", "loglik", "aic", "bic", "n_params", "converged", "starts_converged", "n_starts"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=k).map(|j| format!("mu_{j}")));
        header.extend((1..=k).map(|j| format!("sigma2_{j}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for f in &self.fits {
            let mut row = vec![
                f.maturity.to_string(),
                f.model.label().to_string(),
                opt(f.loglik),
                opt(f.aic),
                opt(f.bic),
                f.n_params.to_string(),
                f.converged.to_string(),
                f.n_starts_converged.to_string(),
                f.n_starts.to_string(),
            ];
            for j in 0..k {
                row.push(opt(f.params.as_ref().map(|p| p.mu[j])));
            }
            for j in 0..k {
                row.push(opt(f.params.as_ref().map(|p| p.sigma2_of(j))));
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        for f in self.fits.iter().filter(|f| !f.classification.is_empty()) {
            let path = dir.join(format!("classification_{}m_{}.csv", f.maturity, f.model.label()));
            let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
            write!(out, "date,regime_rank")?;
            for j in 1..=f.classification[0].probabilities.len() {
                write!(out, ",p_{j}")?;
            }
            writeln!(out)?;
            for row in &f.classification {
                write!(out, "{},{}", row.date, row.regime_rank)?;
                for p in &row.probabilities {
                    write!(out, ",{p}")?;
                }
                writeln!(out)?;
            }
            out.flush()?;
        }
        std::fs::write(dir.join("empirical_report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
