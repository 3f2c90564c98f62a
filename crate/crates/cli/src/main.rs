use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgd_scaling::fit::{chinchilla_fit, loglog_slope, FitPoint, NoiseLevel, DEFAULT_HUBER_DELTA};
use sgd_scaling::harness::{
    aggregate, emit_outputs, read_aggregate, read_fit, read_records, run_grid, AggregateRow,
    ExperimentConfig,
};
use sgd_scaling::plot::{risk_plot, Axis};
use sgd_scaling::seed::{stream_seed, StreamTag};
use sgd_scaling::sgd::Variant;
use sgd_scaling::sketch::{concentration_report, SketchMatrix, SketchedModel};
use sgd_scaling::spectrum::Spectrum;
use sgd_scaling::theory::{self, Regime};
use sgd_scaling::Error;

#[derive(Parser)]
#[command(name = "sgd-scaling", version, about = "Scaling-law experiments for one-pass SGD on sketched linear regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo grid from a config file.
    Simulate(SimulateArgs),
    /// Fit the scaling-law surface (or log-log slopes) to a records file.
    Fit(FitArgs),
    /// Print predicted rates, stepsize and allocation as JSON.
    Theory(TheoryArgs),
    /// Write a sketched-spectrum concentration report as CSV.
    SpectraCheck(SpectraArgs),
    /// Draw log-log plots from an aggregate file.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML config file.
    config: PathBuf,
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long)]
    seed: u64,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the surface fit.
    #[arg(long)]
    no_fit: bool,
    /// Config overrides as `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct FitArgs {
    /// `records.csv` from a simulation.
    records: PathBuf,
    /// Fixed noise level; fitted when absent and `--free-sigma2` is given.
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long)]
    free_sigma2: bool,
    /// Huber threshold on log residuals; `inf` for least squares.
    #[arg(long, default_value_t = DEFAULT_HUBER_DELTA)]
    delta: f64,
    /// Report the slope against N at this fixed M instead of a surface fit.
    #[arg(long, conflicts_with = "slope_n")]
    slope_m: Option<usize>,
    /// Report the slope against M at this fixed N instead of a surface fit.
    #[arg(long)]
    slope_n: Option<usize>,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    PowerLaw,
    Source,
    LogPowerLaw,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    LastIterate,
    Averaged,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, value_enum, default_value = "power-law")]
    regime: RegimeArg,
    #[arg(long, value_enum, default_value = "last-iterate")]
    variant: VariantArg,
    #[arg(long)]
    a: f64,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    gamma0: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Evaluate rates at the recommended stepsize instead of `--gamma0`.
    #[arg(long)]
    tuned: bool,
    /// Compute budget `C = M N` for the optimal allocation.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpectrumArg {
    PowerLaw,
    LogPowerLaw,
}

#[derive(Args)]
struct SpectraArgs {
    #[arg(long, value_enum, default_value = "power-law")]
    kind: SpectrumArg,
    #[arg(long)]
    a: f64,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    normalize: bool,
    /// Report `SH²S^T` instead of `SHS^T`.
    #[arg(long)]
    squared: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// `aggregate.csv` from a simulation.
    aggregate: PathBuf,
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|arg| {
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key=value, got {arg:?}")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected --key=value, got {arg:?}")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn print_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    if let Some(path) = out {
        fs::write(path, format!("{text}\n")).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    println!("{text}");
    Ok(())
}

fn points(rows: &[AggregateRow]) -> Vec<FitPoint> {
    rows.iter()
        .map(|r| FitPoint::new(r.m as f64, r.n as f64, r.mean_risk))
        .collect()
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let overrides = parse_overrides(&args.overrides)?;
    let mut config = ExperimentConfig::from_file(&args.config)?
        .with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    config.master_seed = args.seed;
    if let Some(out) = args.out {
        config.output_dir = Some(out);
    }
    let Some(dir) = config.output_dir.clone() else {
        return Err(Error::Config("no output directory: set output_dir or pass --out".into()));
    };
    let (records, _) = run_grid(&config)?;
    let cells = aggregate(&records)?;
    let excluded: usize = cells.iter().map(|c| c.excluded).sum();
    let rows: Vec<AggregateRow> = cells.into_iter().map(|c| c.row).collect();
    let fit = if args.no_fit || rows.len() < 6 {
        None
    } else {
        match chinchilla_fit(&points(&rows), NoiseLevel::Fixed(config.sigma2), DEFAULT_HUBER_DELTA) {
            Ok(fit) => Some(fit.with_excluded(excluded)),
            Err(e) => {
                log::warn!("surface fit skipped: {e}");
                None
            }
        }
    };
    for path in emit_outputs(&dir, &rows, fit.as_ref(), config.sigma2)? {
        log::info!("wrote {}", path.display());
    }
    println!("{}", dir.display());
    Ok(())
}

fn fit(args: FitArgs) -> Result<(), Error> {
    let records = read_records(&args.records)?;
    let cells = aggregate(&records)?;
    let excluded: usize = cells.iter().map(|c| c.excluded).sum();
    let rows: Vec<AggregateRow> = cells.into_iter().map(|c| c.row).collect();
    let slope = |pairs: Vec<(f64, f64)>, axis: &str, fixed: usize| -> Result<(), Error> {
        if pairs.is_empty() {
            return Err(Error::Config(format!("no cells at {axis}={fixed}")));
        }
        let (slope, stderr) = loglog_slope(&pairs, args.sigma2)?;
        print_json(
            &serde_json::json!({ "fixed": axis, "at": fixed, "slope": slope, "stderr": stderr, "points": pairs.len() }),
            args.out.as_deref(),
        )
    };
    if let Some(m) = args.slope_m {
        let pairs = rows.iter().filter(|r| r.m == m).map(|r| (r.n as f64, r.mean_risk)).collect();
        return slope(pairs, "M", m);
    }
    if let Some(n) = args.slope_n {
        let pairs = rows.iter().filter(|r| r.n == n).map(|r| (r.m as f64, r.mean_risk)).collect();
        return slope(pairs, "N", n);
    }
    let noise = if args.free_sigma2 {
        NoiseLevel::Free
    } else {
        NoiseLevel::Fixed(args.sigma2)
    };
    let fit = chinchilla_fit(&points(&rows), noise, args.delta)?.with_excluded(excluded);
    print_json(&fit, args.out.as_deref())
}

fn theory_cmd(args: TheoryArgs) -> Result<(), Error> {
    let regime = match args.regime {
        RegimeArg::PowerLaw => Regime::PowerLaw,
        RegimeArg::Source => Regime::Source,
        RegimeArg::LogPowerLaw => Regime::LogPowerLaw,
    };
    let variant = match args.variant {
        VariantArg::LastIterate => Variant::LastIterate,
        VariantArg::Averaged => Variant::Averaged,
    };
    let (rates, stepsize) = if args.tuned {
        theory::tuned_rates(regime, variant, args.a, args.b, args.m, args.n, args.sigma2)?
    } else {
        (
            theory::predicted_rates(regime, variant, args.a, args.b, args.m, args.n, args.gamma0, args.sigma2)?,
            theory::optimal_stepsize(regime, args.a, args.b, args.m, args.n)?,
        )
    };
    let allocation = match args.budget {
        Some(c) => Some(match (regime, args.b) {
            (Regime::Source, Some(b)) => theory::source_allocation(c, args.a, b)?,
            _ => theory::compute_optimal_allocation(c, args.a)?,
        }),
        None => None,
    };
    print_json(
        &serde_json::json!({ "rates": rates, "stepsize": stepsize, "allocation": allocation }),
        None,
    )
}

fn spectra_check(args: SpectraArgs) -> Result<(), Error> {
    let spectrum = match args.kind {
        SpectrumArg::PowerLaw => Spectrum::power_law(args.d, args.a, args.normalize)?,
        SpectrumArg::LogPowerLaw => Spectrum::log_power_law(args.d, args.a, args.normalize)?,
    };
    let sketch = SketchMatrix::sample(args.m, args.d, stream_seed(args.seed, StreamTag::Sketch, &[args.m as u64]))?;
    let model = SketchedModel::build(sketch, Arc::new(spectrum), vec![0.0; args.d])?;
    let report = concentration_report(&model)?;
    log::info!(
        "band {:.3}, squared band {:.3}{}",
        report.band,
        report.sq_band,
        report.k_m.map(|k| format!(", k_M = {k}")).unwrap_or_default()
    );
    let csv_err = |path: PathBuf| move |e| Error::Csv { path, source: e };
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            report.write_csv(file, args.squared).map_err(csv_err(path.clone()))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            report.write_csv(&mut lock, args.squared).map_err(csv_err("<stdout>".into()))?;
            lock.flush().map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

fn plot(args: PlotArgs) -> Result<(), Error> {
    let rows = read_aggregate(&args.aggregate)?;
    let fit = args.fit.as_ref().map(read_fit).transpose()?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    for axis in [Axis::N, Axis::M] {
        let path = args.out.join(axis.file_name());
        fs::write(&path, risk_plot(&rows, fit.as_ref(), args.sigma2, axis)).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        println!("{}", path.display());
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_config_error() => 2,
        Error::Io { .. } | Error::Csv { .. } | Error::Json { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Fit(args) => fit(args),
        Command::Theory(args) => theory_cmd(args),
        Command::SpectraCheck(args) => spectra_check(args),
        Command::Plot(args) => plot(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
