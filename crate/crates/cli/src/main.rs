//! `tvtp`: simulate, fit, filter and evaluate Markov-switching models with
//! time-varying transition probabilities.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tvtp::data::YearMonth;
use tvtp::empirical::{run_empirical, EmpiricalConfig, DEFAULT_EMPIRICAL_CUTOFF};
use tvtp::estimate::EstimateOptions;
use tvtp::evaluation::{forecast_metrics, linspace, profile_loglik, ProfileAxis};
use tvtp::mc::{default_grid, run_grid, McConfig, McScenario};
use tvtp::{
    classify_regimes, dgp_preset, estimate_with, run_filter, simulate, Dataset, Dynamics, Error, ModelSpec,
    Parameterization, Params, VarianceStructure,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "tvtp", version, about = "Markov-switching models with time-varying transition probabilities")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Leading likelihood terms excluded from the objective.
    #[arg(long, global = true)]
    cutoff: Option<usize>,
    /// Simulated periods discarded before the retained sample.
    #[arg(long = "burn-in", global = true)]
    burn_in: Option<usize>,
    /// Directory receiving all outputs.
    #[arg(long = "out-dir", global = true, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a series from a preset design or a model file.
    Simulate {
        #[command(flatten)]
        source: ModelSource,
        /// Retained sample length.
        #[arg(short = 'T', long = "t-len", default_value_t = 1000)]
        t_len: usize,
        /// Output CSV file name.
        #[arg(long, default_value = "simulated.csv")]
        output: String,
    },
    /// Multi-start maximum likelihood; writes the estimation result as JSON.
    Fit {
        /// Data CSV with a `y` column and an optional `x` column.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        spec: SpecArgs,
        /// Number of random starts.
        #[arg(long, default_value_t = 10)]
        starts: usize,
        /// Skip standard errors.
        #[arg(long = "no-se")]
        no_se: bool,
        #[arg(long, default_value = "fit.json")]
        output: String,
    },
    /// Hamilton filter at given parameters; writes predicted and filtered probabilities.
    Filter {
        #[arg(long)]
        data: PathBuf,
        /// JSON with `spec` and `params` (or a `fit` result).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "filtered.csv")]
        output: String,
    },
    /// One-step forecast error metrics at given parameters.
    ForecastMetrics {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "forecast_metrics.json")]
        output: String,
    },
    /// Monte Carlo study; writes replications.jsonl and the summary tables.
    Mc {
        /// Run the full reference design grid.
        #[arg(long = "paper-grid", conflicts_with = "config")]
        paper_grid: bool,
        /// TOML file with `[[scenario]]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the replication count of every scenario.
        #[arg(long)]
        replications: Option<usize>,
        /// Override the number of starts of every scenario.
        #[arg(long)]
        starts: Option<usize>,
        /// Keep only these designs.
        #[arg(long, value_delimiter = ',')]
        dgps: Vec<u32>,
        /// Keep only these sample sizes.
        #[arg(long = "sample-sizes", value_delimiter = ',')]
        sample_sizes: Vec<usize>,
    },
    /// Profile log-likelihood over one or two parameter directions.
    Profile {
        #[arg(long)]
        data: PathBuf,
        /// Fitted model (JSON with `spec` and `params`, or a `fit` result).
        #[arg(long)]
        model: PathBuf,
        /// Axis such as `A:1,-1`, `mu[1]` or `sigma2`; repeat for a 2D grid.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        /// Grid `lo:hi:n` per axis, in the same order.
        #[arg(long = "grid", required = true, allow_hyphen_values = true)]
        grids: Vec<String>,
        #[arg(long, default_value = "profile.csv")]
        output: String,
    },
    /// Three-regime fits of yield changes per maturity and specification.
    Empirical {
        /// Yields CSV: a `YYYY-MM` date column and one column per maturity in months.
        #[arg(long)]
        yields: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,12,36,72")]
        maturities: Vec<u32>,
        #[arg(long, value_delimiter = ',', default_value = "const,tvp,exog,gas")]
        models: Vec<String>,
        #[arg(long, default_value_t = 100)]
        starts: usize,
        /// First month, `YYYY-MM`.
        #[arg(long)]
        from: Option<String>,
        /// Last month, `YYYY-MM`.
        #[arg(long)]
        to: Option<String>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Preset design 1 to 9.
    #[arg(long)]
    dgp: Option<u32>,
    /// JSON with `spec` and `params`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// Take the specification of a preset design.
    #[arg(long, conflicts_with_all = ["k", "parameterization", "variance"])]
    dgp: Option<u32>,
    #[arg(long)]
    k: Option<usize>,
    /// `diagonal` or `offdiagonal` (default: diagonal for two regimes).
    #[arg(long)]
    parameterization: Option<String>,
    /// `common` or `regime`.
    #[arg(long)]
    variance: Option<String>,
    /// `const`, `tvp`, `exog` or `gas` (default: the preset's dynamics, else `const`).
    #[arg(long)]
    dynamics: Option<String>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) | Error::Parameter(_) | Error::Dimension { .. } | Error::Domain { .. } => EXIT_USAGE,
            Error::Data(_) | Error::Degenerate { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => EXIT_DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    std::fs::create_dir_all(&g.out_dir)?;
    match cli.command {
        Command::Simulate { source, t_len, output } => {
            let (spec, params) = match (source.dgp, source.model) {
                (Some(id), _) => dgp_preset(id)?,
                (None, Some(path)) => read_model(&path)?,
                (None, None) => unreachable!("clap enforces one source"),
            };
            let sim = simulate(&spec, &params, t_len, g.burn_in.unwrap_or(100), g.seed.unwrap_or(1), None)?;
            let path = g.out_dir.join(&output);
            sim.write_csv(&path)?;
            write_json(&g.out_dir.join(with_suffix(&output, "_truth.json")), &ModelFile { spec, params })?;
            println!("wrote {} ({} observations)", path.display(), sim.y.len());
            Ok(())
        }
        Command::Fit { data, spec, starts, no_se, output } => {
            let spec = spec.resolve()?;
            let data = load_data(&data)?.for_dynamics(spec.dynamics)?;
            let mut opts = EstimateOptions::new(starts, g.seed.unwrap_or(1), g.cutoff.unwrap_or(10));
            opts.compute_se = !no_se;
            let res = estimate_with(&data, &spec, &opts)?;
            let path = g.out_dir.join(&output);
            std::fs::write(&path, res.to_json()?)?;
            println!(
                "loglik {:.4}  aic {:.4}  bic {:.4}  converged {} ({}/{} starts)  -> {}",
                res.loglik,
                res.aic,
                res.bic,
                res.converged,
                res.n_starts_converged,
                starts,
                path.display()
            );
            if res.converged {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_NONCONVERGENCE,
                    message: "no start met the convergence criterion".into(),
                })
            }
        }
        Command::Filter { data, model, output } => {
            let (spec, params) = read_model(&model)?;
            let data = load_data(&data)?.for_dynamics(spec.dynamics)?;
            let out = run_filter(&data, &spec, &params, g.cutoff.unwrap_or(0))?;
            let regimes = classify_regimes(&out);
            let mut w = csv_writer(&g.out_dir.join(&output))?;
            let mut header = vec!["t".to_string(), "pred_mean".into(), "pred_var".into(), "regime".into()];
            header.extend((1..=spec.k).map(|j| format!("pred_{j}")));
            header.extend((1..=spec.k).map(|j| format!("filt_{j}")));
            writeln_csv(&mut w, &header)?;
            for t in 0..out.len() {
                let mut row = vec![(t + 1).to_string(), out.pred_mean[t].to_string(), out.pred_var[t].to_string()];
                row.push((regimes[t] + 1).to_string());
                row.extend(out.xi_pred[t].iter().map(f64::to_string));
                row.extend(out.xi_filt[t].iter().map(f64::to_string));
                writeln_csv(&mut w, &row)?;
            }
            println!("loglik {:.6}", out.loglik);
            Ok(())
        }
        Command::ForecastMetrics { data, model, output } => {
            let (spec, params) = read_model(&model)?;
            let data = load_data(&data)?.for_dynamics(spec.dynamics)?;
            let cutoff = g.cutoff.unwrap_or(0);
            let out = run_filter(&data, &spec, &params, cutoff)?;
            let m = forecast_metrics(&out, &data.y, cutoff)?;
            write_json(&g.out_dir.join(&output), &m)?;
            println!("{}", serde_json::to_string(&m)?);
            Ok(())
        }
        Command::Mc { paper_grid, config, replications, starts, dgps, sample_sizes } => {
            let mut scenarios: Vec<McScenario> = match (paper_grid, config) {
                (true, _) => default_grid(),
                (false, Some(path)) => McConfig::from_toml(&std::fs::read_to_string(&path)?)?.scenarios,
                (false, None) => return Err(usage("mc needs --paper-grid or --config")),
            };
            scenarios.retain(|s| {
                (dgps.is_empty() || dgps.contains(&s.dgp_id)) && (sample_sizes.is_empty() || sample_sizes.contains(&s.t_len))
            });
            if scenarios.is_empty() {
                return Err(usage("no scenario left after filtering"));
            }
            for s in &mut scenarios {
                if let Some(r) = replications {
                    s.replications = r;
                }
                if let Some(n) = starts {
                    s.n_starts = n;
                }
                if let Some(seed) = g.seed {
                    s.base_seed = seed;
                }
                if let Some(b) = g.burn_in {
                    s.burn_in = b;
                }
                if let Some(c) = g.cutoff {
                    s.cutoff = c;
                }
            }
            let res = run_grid(&scenarios, &g.out_dir)?;
            println!(
                "{} records; tables written to {}",
                res.records.len(),
                g.out_dir.display()
            );
            Ok(())
        }
        Command::Profile { data, model, axes, grids, output } => {
            let (spec, params) = read_model(&model)?;
            if axes.len() != grids.len() {
                return Err(usage("give one --grid per --axis"));
            }
            let data = load_data(&data)?.for_dynamics(spec.dynamics)?;
            let axes = axes.iter().map(|a| ProfileAxis::parse(&spec, a)).collect::<tvtp::Result<Vec<_>>>()?;
            let grids = grids.iter().map(|s| parse_grid(s)).collect::<CliResult<Vec<_>>>()?;
            let res = profile_loglik(&data, &spec, &params, &axes, &grids, g.cutoff.unwrap_or(10))?;
            res.write_csv(&g.out_dir.join(&output))?;
            if let Some(best) = res.argmax() {
                println!("max loglik {:?} at {:?}", best.loglik, best.values);
            }
            Ok(())
        }
        Command::Empirical { yields, maturities, models, starts, from, to } => {
            let models = models.iter().map(|m| m.parse::<Dynamics>()).collect::<tvtp::Result<Vec<_>>>()?;
            let date_range = match (from, to) {
                (None, None) => None,
                (a, b) => {
                    let lo = a.as_deref().unwrap_or("0-01").parse::<YearMonth>()?;
                    let hi = b.as_deref().unwrap_or("9999-12").parse::<YearMonth>()?;
                    Some((lo, hi))
                }
            };
            let mut cfg = EmpiricalConfig::new(yields, maturities, models);
            cfg.n_starts = starts;
            cfg.seed = g.seed.unwrap_or(1);
            cfg.cutoff = g.cutoff.unwrap_or(DEFAULT_EMPIRICAL_CUTOFF);
            cfg.date_range = date_range;
            let report = run_empirical(&cfg)?;
            report.write(&g.out_dir)?;
            println!("{} levels per maturity", report.n_levels);
            for f in &report.fits {
                println!(
                    "{:>3}m {:<5} loglik {:>10} aic {:>10} bic {:>10} p {:>2} converged {}/{}{}",
                    f.maturity,
                    f.model.label(),
                    fmt_opt(f.loglik),
                    fmt_opt(f.aic),
                    fmt_opt(f.bic),
                    f.n_params,
                    f.n_starts_converged,
                    f.n_starts,
                    f.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default()
                );
            }
            Ok(())
        }
    }
}

impl SpecArgs {
    fn resolve(&self) -> CliResult<ModelSpec> {
        let dynamics = self.dynamics.as_deref().map(str::parse::<Dynamics>).transpose()?;
        if let Some(id) = self.dgp {
            let preset = dgp_preset(id)?.0;
            return Ok(preset.with_dynamics(dynamics.unwrap_or(preset.dynamics)));
        }
        let dynamics = dynamics.unwrap_or(Dynamics::Constant);
        let k = self.k.unwrap_or(2);
        let parameterization = match &self.parameterization {
            Some(p) => p.parse::<Parameterization>()?,
            None if k == 2 => Parameterization::Diagonal,
            None => Parameterization::OffDiagonal,
        };
        let variance = match &self.variance {
            Some(v) => v.parse::<VarianceStructure>()?,
            None => VarianceStructure::RegimeSpecific,
        };
        Ok(ModelSpec::new(k, parameterization, variance, dynamics)?)
    }
}

#[derive(Serialize)]
struct ModelFile {
    spec: ModelSpec,
    params: Params,
}

/// Reads `{spec, params}` or a fit result (`{spec, params_hat, ...}`).
fn read_model(path: &Path) -> CliResult<(ModelSpec, Params)> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::Data(format!("{}: {e}", path.display()))))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let spec: ModelSpec = serde_json::from_value(v.get("spec").cloned().ok_or_else(|| missing(path, "spec"))?)?;
    let params = v
        .get("params")
        .or_else(|| v.get("params_hat"))
        .cloned()
        .ok_or_else(|| missing(path, "params"))?;
    let params: Params = serde_json::from_value(params)?;
    params.validate(&spec)?;
    Ok((spec, params))
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    Dataset::from_csv(path).map_err(|e| match e {
        e @ (Error::Io(_) | Error::Csv(_)) => Error::Data(format!("{}: {e}", path.display())).into(),
        e => e.into(),
    })
}

fn missing(path: &Path, field: &str) -> Failure {
    Error::Data(format!("{} has no '{field}' field", path.display())).into()
}

fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || usage(format!("grid '{s}' is not lo:hi:n"));
    let [lo, hi, n] = parts.as_slice() else {
        return Err(bad());
    };
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok(linspace(lo, hi, n))
}

fn with_suffix(name: &str, suffix: &str) -> String {
    let stem = Path::new(name).file_stem().map_or(name.into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}{suffix}")
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn csv_writer(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn writeln_csv(w: &mut impl std::io::Write, fields: &[String]) -> CliResult<()> {
    writeln!(w, "{}", fields.join(","))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.2}"))
}
