//! Monte Carlo experiment grids over `(M, N, trial)`.
//!
//! A run writes `manifest.json` up front and appends to `records.csv` one trial
//! at a time, in trial order regardless of which worker finished first.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::plot;
use crate::risk::{decompose, DEFAULT_STEPSIZE_CONSTANT};
use crate::seed::{stream_seed, trial_seed, StreamTag};
use crate::sgd::{run_fast, Variant};
use crate::sketch::{SketchMatrix, SketchedModel};
use crate::spectrum::{sample_prior, PriorSpec, Spectrum, SpectrumKind};
use crate::stats;

pub const RECORDS_FILE: &str = "records.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIT_FILE: &str = "fit.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Isotropic,
    Source,
}

fn default_true() -> bool {
    true
}

fn default_parallelism() -> usize {
    1
}

/// A flat key-value experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spectrum_kind: SpectrumKind,
    pub d: usize,
    /// Decay exponent; ignored for explicit spectra.
    #[serde(default)]
    pub a: f64,
    /// Source exponent, used with `prior = "source"`.
    #[serde(default)]
    pub b: Option<f64>,
    /// Eigenvalue file for `spectrum_kind = "explicit"`.
    #[serde(default)]
    pub spectrum_path: Option<PathBuf>,
    #[serde(default)]
    pub normalize: bool,
    pub prior: PriorKind,
    pub sigma2: f64,
    pub gamma0: f64,
    pub sgd_variant: Variant,
    pub m_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// One sketch per `(trial, M)` shared by every `N`, instead of one per cell.
    #[serde(default = "default_true")]
    pub reuse_sketch_across_n: bool,
    /// Fill `runtime_ms`. Off by default so that reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are parsed as TOML, falling back
    /// to a bare string.
    pub fn with_overrides<'a, I>(&self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let key = key.replace('-', "_");
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key, value);
        }
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, grid) in [("m_grid", &self.m_grid), ("n_grid", &self.n_grid)] {
            if grid.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} must be strictly increasing, got {grid:?}"));
            }
        }
        if self.m_grid[0] == 0 || *self.m_grid.last().unwrap() > self.d {
            return bad(format!("m_grid must lie in [1, d={}], got {:?}", self.d, self.m_grid));
        }
        let min_n = match self.sgd_variant {
            Variant::LastIterate => 2,
            Variant::Averaged => 1,
        };
        if self.n_grid[0] < min_n {
            return bad(format!("n_grid values must be at least {min_n}"));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return bad(format!("sigma2 must be finite and ≥ 0, got {}", self.sigma2));
        }
        if !(self.gamma0 >= 0.0) || !self.gamma0.is_finite() {
            return bad(format!("gamma0 must be finite and ≥ 0, got {}", self.gamma0));
        }
        match self.spectrum_kind {
            SpectrumKind::Explicit if self.spectrum_path.is_none() => {
                return bad("explicit spectrum needs spectrum_path".into())
            }
            SpectrumKind::PowerLaw | SpectrumKind::LogPowerLaw if !(self.a > 1.0) => {
                return bad(format!("a must be > 1, got {}", self.a))
            }
            _ => {}
        }
        match (self.prior, self.b) {
            (PriorKind::Source, None) => bad("source prior needs b".into()),
            (PriorKind::Source, Some(_)) if self.spectrum_kind != SpectrumKind::PowerLaw => {
                bad("source prior needs a power-law spectrum".into())
            }
            (PriorKind::Source, Some(b)) if !(b > 1.0) => bad(format!("b must be > 1, got {b}")),
            (PriorKind::Isotropic, Some(_)) => bad("b only applies to the source prior".into()),
            _ => Ok(()),
        }
    }

    pub fn build_spectrum(&self) -> Result<Spectrum> {
        let spectrum = match self.spectrum_kind {
            SpectrumKind::PowerLaw => Spectrum::power_law(self.d, self.a, self.normalize)?,
            SpectrumKind::LogPowerLaw => Spectrum::log_power_law(self.d, self.a, self.normalize)?,
            SpectrumKind::Explicit => {
                let path = self.spectrum_path.as_ref().expect("validated");
                Spectrum::from_csv(path, self.normalize)?
            }
        };
        if spectrum.d() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: spectrum.d(),
            });
        }
        Ok(spectrum)
    }

    pub fn prior_spec(&self) -> PriorSpec {
        match self.prior {
            PriorKind::Isotropic => PriorSpec::Isotropic,
            PriorKind::Source => PriorSpec::Source {
                b: self.b.expect("validated"),
            },
        }
    }

    fn sketch_seed(&self, trial_seed: u64, m: usize, n: usize) -> u64 {
        if self.reuse_sketch_across_n {
            stream_seed(trial_seed, StreamTag::Sketch, &[m as u64])
        } else {
            stream_seed(trial_seed, StreamTag::Sketch, &[m as u64, n as u64])
        }
    }
}

/// One row of `records.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub spectrum_kind: SpectrumKind,
    pub d: usize,
    pub a: Option<f64>,
    pub b: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma0: f64,
    pub sigma2: f64,
    pub variant: Variant,
    pub trial: usize,
    /// Trial seed; every stream of the row derives from it.
    pub seed: u64,
    /// `sigma2 + approx + excess_emp`
    pub risk_emp: f64,
    pub excess_emp: f64,
    pub approx: f64,
    pub bias_cf: f64,
    pub variance_cf: f64,
    pub d_eff: f64,
    pub diverged: bool,
    pub runtime_ms: u64,
}

pub const RECORD_HEADER: &str = "spectrum_kind,d,a,b,M,N,gamma0,sigma2,variant,trial,seed,risk_emp,excess_emp,approx,bias_cf,variance_cf,d_eff,diverged,runtime_ms";

/// The config plus what is needed to tell runs apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub config: ExperimentConfig,
    pub version: String,
    pub started_at: String,
}

impl Manifest {
    pub fn new(config: ExperimentConfig) -> Self {
        Manifest {
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

struct Context {
    config: ExperimentConfig,
    spectrum: Arc<Spectrum>,
    prior: PriorSpec,
}

impl Context {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Context {
            config: config.clone(),
            spectrum: Arc::new(config.build_spectrum()?),
            prior: config.prior_spec(),
        })
    }

    fn model(&self, seed: u64, m: usize, n: usize, w_star: &[f64]) -> Result<SketchedModel> {
        let sketch = SketchMatrix::sample(m, self.config.d, self.config.sketch_seed(seed, m, n))?;
        SketchedModel::build(sketch, Arc::clone(&self.spectrum), w_star.to_vec())
    }

    fn record(&self, model: &SketchedModel, trial: usize, seed: u64, n: usize) -> Result<ExperimentRecord> {
        let c = &self.config;
        let started = Instant::now();
        let schedule = c.sgd_variant.schedule(c.gamma0, n)?;
        let data_seed = stream_seed(seed, StreamTag::Data, &[model.m() as u64, n as u64]);
        let outcome = run_fast(model, c.sigma2, &schedule, c.sgd_variant, data_seed)?;
        let report = decompose(
            model,
            &schedule,
            c.sgd_variant,
            c.sigma2,
            Some(outcome.excess_risk),
            DEFAULT_STEPSIZE_CONSTANT,
        )?;
        let approx = model.approx_error();
        Ok(ExperimentRecord {
            spectrum_kind: c.spectrum_kind,
            d: c.d,
            a: self.spectrum.a(),
            b: c.b,
            m: model.m(),
            n,
            gamma0: c.gamma0,
            sigma2: c.sigma2,
            variant: c.sgd_variant,
            trial,
            seed,
            risk_emp: c.sigma2 + approx + outcome.excess_risk,
            excess_emp: outcome.excess_risk,
            approx,
            bias_cf: report.bias_cf,
            variance_cf: report.variance_cf,
            d_eff: report.d_eff,
            diverged: outcome.diverged,
            runtime_ms: if c.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    fn trial(&self, trial: usize) -> Result<Vec<ExperimentRecord>> {
        let c = &self.config;
        let seed = trial_seed(c.master_seed, trial as u64);
        let w_star = sample_prior(&self.spectrum, &self.prior, stream_seed(seed, StreamTag::Prior, &[]))?;
        let mut out = Vec::with_capacity(c.m_grid.len() * c.n_grid.len());
        for &m in &c.m_grid {
            let mut shared = None;
            for &n in &c.n_grid {
                let fresh;
                let model = if c.reuse_sketch_across_n {
                    if shared.is_none() {
                        shared = Some(self.model(seed, m, n, &w_star)?);
                    }
                    shared.as_ref().unwrap()
                } else {
                    fresh = self.model(seed, m, n, &w_star)?;
                    &fresh
                };
                out.push(self.record(model, trial, seed, n)?);
            }
        }
        Ok(out)
    }
}

struct RecordSink {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl RecordSink {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RecordSink {
            writer: csv::Writer::from_writer(BufWriter::new(file)),
            path,
        })
    }

    fn append(&mut self, rows: &[ExperimentRecord]) -> Result<()> {
        for row in rows {
            self.writer.serialize(row).map_err(|e| Error::csv(&self.path, e))?;
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs every `(trial, M, N)` cell and returns the rows in trial-major order.
///
/// When `output_dir` is set, `manifest.json` is written before the first trial
/// and `records.csv` grows one completed trial at a time.
pub fn run_grid(config: &ExperimentConfig) -> Result<(Vec<ExperimentRecord>, Manifest)> {
    let ctx = Context::new(config)?;
    let manifest = Manifest::new(config.clone());
    let mut sink = match &config.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            manifest.write(dir.join(MANIFEST_FILE))?;
            Some(RecordSink::create(dir.join(RECORDS_FILE))?)
        }
        None => None,
    };
    log::info!(
        "grid: {} trials × {} M × {} N, sketch reuse across N {}",
        config.trials,
        config.m_grid.len(),
        config.n_grid.len(),
        if config.reuse_sketch_across_n { "on" } else { "off" }
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<ExperimentRecord>>)>();
    let mut records = Vec::with_capacity(config.trials * config.m_grid.len() * config.n_grid.len());
    let mut failure = None;

    std::thread::scope(|scope| {
        let ctx = &ctx;
        let abort = &abort;
        scope.spawn(move || {
            pool.install(|| {
                (0..config.trials).into_par_iter().for_each_with(tx, |tx, t| {
                    if abort.load(Ordering::Relaxed) {
                        return;
                    }
                    let _ = tx.send((t, ctx.trial(t)));
                });
            });
        });

        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (t, result) in rx {
            match result {
                Ok(rows) => {
                    pending.insert(t, rows);
                }
                Err(e) => {
                    abort.store(true, Ordering::Relaxed);
                    failure.get_or_insert(e);
                    continue;
                }
            }
            while let Some(rows) = pending.remove(&next) {
                if failure.is_none() {
                    if let Some(sink) = sink.as_mut() {
                        if let Err(e) = sink.append(&rows) {
                            abort.store(true, Ordering::Relaxed);
                            failure = Some(e);
                        }
                    }
                }
                records.extend(rows);
                next += 1;
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let diverged = records.iter().filter(|r| r.diverged).count();
    if diverged > 0 {
        log::warn!("{diverged} of {} runs diverged", records.len());
    }
    Ok((records, manifest))
}

/// Recomputes a single row from its config, trial and cell.
pub fn replay_row(config: &ExperimentConfig, trial: usize, m: usize, n: usize) -> Result<ExperimentRecord> {
    if !config.m_grid.contains(&m) || !config.n_grid.contains(&n) {
        return Err(Error::Config(format!("cell (M={m}, N={n}) is not on the grid")));
    }
    if trial >= config.trials {
        return Err(Error::Config(format!("trial {trial} out of range")));
    }
    let ctx = Context::new(config)?;
    let seed = trial_seed(config.master_seed, trial as u64);
    let w_star = sample_prior(&ctx.spectrum, &ctx.prior, stream_seed(seed, StreamTag::Prior, &[]))?;
    let model = ctx.model(seed, m, n, &w_star)?;
    ctx.record(&model, trial, seed, n)
}

pub fn write_records(path: impl AsRef<Path>, records: &[ExperimentRecord]) -> Result<()> {
    let mut sink = RecordSink::create(path.as_ref().to_path_buf())?;
    sink.append(records)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .collect::<csv::Result<Vec<_>>>()
        .map_err(|e| Error::csv(path, e))
}

/// One line of `aggregate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub mean_risk: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Trials that entered the mean.
    #[serde(rename = "n")]
    pub count: usize,
}

/// Aggregate of one `(M, N)` cell, with the closed-form means alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub row: AggregateRow,
    pub excluded: usize,
    pub mean_excess: f64,
    pub mean_approx: f64,
    pub mean_bias_cf: f64,
    pub mean_variance_cf: f64,
}

/// Per-cell mean risk with a 95% normal CI, ordered by `(M, N)`.
///
/// Diverged rows are dropped and counted. Rows are sorted by trial inside each
/// cell, so the result does not depend on record order.
pub fn aggregate(records: &[ExperimentRecord]) -> Result<Vec<CellSummary>> {
    let mut cells: BTreeMap<(usize, usize), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.m, r.n)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(cells.len());
    let mut excluded_total = 0;
    for ((m, n), mut rows) in cells {
        rows.sort_by_key(|r| r.trial);
        let excluded = rows.iter().filter(|r| r.diverged).count();
        rows.retain(|r| !r.diverged);
        if rows.is_empty() {
            return Err(Error::EmptyCell { m, n, excluded });
        }
        excluded_total += excluded;
        let col = |f: fn(&ExperimentRecord) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
        let (mean_risk, ci_low, ci_high) = stats::mean_ci95(&col(|r| r.risk_emp));
        out.push(CellSummary {
            row: AggregateRow {
                m,
                n,
                mean_risk,
                ci_low,
                ci_high,
                count: rows.len(),
            },
            excluded,
            mean_excess: stats::mean(&col(|r| r.excess_emp)),
            mean_approx: stats::mean(&col(|r| r.approx)),
            mean_bias_cf: stats::mean(&col(|r| r.bias_cf)),
            mean_variance_cf: stats::mean(&col(|r| r.variance_cf)),
        });
    }
    if excluded_total > 0 {
        log::warn!("excluded {excluded_total} diverged runs from aggregation");
    }
    Ok(out)
}

pub fn write_aggregate(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .collect::<csv::Result<Vec<_>>>()
        .map_err(|e| Error::csv(path, e))
}

pub fn write_fit(path: impl AsRef<Path>, fit: &FitResult) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(fit).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_fit(path: impl AsRef<Path>) -> Result<FitResult> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `aggregate.csv`, `fit.json` when a fit is given, and log-log plots
/// of `risk − σ²` against `N` (one line per `M`) and against `M` (one per `N`).
/// Returns the paths written.
pub fn emit_outputs(
    dir: impl AsRef<Path>,
    rows: &[AggregateRow],
    fit: Option<&FitResult>,
    sigma2: f64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let path = dir.join(AGGREGATE_FILE);
    write_aggregate(&path, rows)?;
    written.push(path);

    if let Some(fit) = fit {
        let path = dir.join(FIT_FILE);
        write_fit(&path, fit)?;
        written.push(path);
    }

    for axis in [plot::Axis::N, plot::Axis::M] {
        let svg = plot::risk_plot(rows, fit, sigma2, axis);
        let path = dir.join(axis.file_name());
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Groups rows by cell key for quick lookups.
pub fn index_cells(cells: &[CellSummary]) -> HashMap<(usize, usize), &CellSummary> {
    cells.iter().map(|c| ((c.row.m, c.row.n), c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(
            r#"
spectrum_kind = "power_law"
d = 64
a = 2.0
prior = "isotropic"
sigma2 = 1.0
gamma0 = 0.1
sgd_variant = "last_iterate"
m_grid = [4, 8]
n_grid = [16, 64]
trials = 3
master_seed = 7
"#,
        )
        .unwrap()
    }

    fn record(m: usize, n: usize, trial: usize, risk: f64, diverged: bool) -> ExperimentRecord {
        ExperimentRecord {
            spectrum_kind: SpectrumKind::PowerLaw,
            d: 8,
            a: Some(2.0),
            b: None,
            m,
            n,
            gamma0: 0.1,
            sigma2: 1.0,
            variant: Variant::LastIterate,
            trial,
            seed: trial as u64,
            risk_emp: risk,
            excess_emp: risk - 1.0,
            approx: 0.0,
            bias_cf: 0.0,
            variance_cf: 0.0,
            d_eff: 0.0,
            diverged,
            runtime_ms: 0,
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = small_config();
        assert!(c.reuse_sketch_across_n);
        assert!(!c.record_timing);
        assert_eq!(c.parallelism, 1);
        let text = c.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);

        for (k, v) in [
            ("m_grid", "[8, 4]"),
            ("m_grid", "[]"),
            ("m_grid", "[4, 128]"),
            ("n_grid", "[1, 2]"),
            ("trials", "0"),
            ("sigma2", "-1.0"),
            ("a", "1.0"),
            ("prior", "\"source\""),
            ("b", "2.0"),
        ] {
            let err = c.with_overrides([(k, v)]).unwrap_err();
            assert!(err.is_config_error(), "{k}={v}: {err}");
        }
        assert!(ExperimentConfig::from_toml_str("d = 3\nbogus = 1").is_err());
    }

    #[test]
    fn overrides() {
        let c = small_config()
            .with_overrides([("trials", "5"), ("sgd-variant", "averaged"), ("m_grid", "[2,4,8]")])
            .unwrap();
        assert_eq!(c.trials, 5);
        assert_eq!(c.sgd_variant, Variant::Averaged);
        assert_eq!(c.m_grid, vec![2, 4, 8]);
        let c = small_config()
            .with_overrides([("prior", "source"), ("b", "2.5")])
            .unwrap();
        assert_eq!(c.prior_spec(), PriorSpec::Source { b: 2.5 });
    }

    #[test]
    fn single_record_is_replayable() {
        let config = small_config()
            .with_overrides([("trials", "1"), ("m_grid", "[8]"), ("n_grid", "[64]")])
            .unwrap();
        let (records, manifest) = run_grid(&config).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.risk_emp, r.sigma2 + r.approx + r.excess_emp);
        let again = replay_row(&manifest.config, r.trial, r.m, r.n).unwrap();
        assert_eq!(&again, r);
    }

    #[test]
    fn zero_stepsize_leaves_the_initial_excess() {
        let config = small_config()
            .with_overrides([("sigma2", "0.0"), ("gamma0", "0.0")])
            .unwrap();
        let (records, _) = run_grid(&config).unwrap();
        let spectrum = Arc::new(config.build_spectrum().unwrap());
        for r in &records {
            let w = sample_prior(&spectrum, &PriorSpec::Isotropic, stream_seed(r.seed, StreamTag::Prior, &[])).unwrap();
            let sketch = SketchMatrix::sample(r.m, r.d, config.sketch_seed(r.seed, r.m, r.n)).unwrap();
            let model = SketchedModel::build(sketch, Arc::clone(&spectrum), w).unwrap();
            let expected: f64 = model
                .eigenvalues()
                .iter()
                .zip(model.v_star_rotated())
                .map(|(l, v)| l * v * v)
                .sum();
            assert!((r.excess_emp - expected).abs() <= 1e-12 * expected, "{} vs {expected}", r.excess_emp);
            assert_eq!(r.variance_cf, 0.0);
        }
    }

    #[test]
    fn aggregate_counts_and_exclusions() {
        let rows = vec![
            record(4, 16, 1, 3.0, false),
            record(4, 16, 0, 1.0, false),
            record(4, 16, 2, 100.0, true),
            record(8, 16, 0, 2.0, false),
        ];
        let cells = aggregate(&rows).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].row.mean_risk, 2.0);
        assert_eq!(cells[0].row.count, 2);
        assert_eq!(cells[0].excluded, 1);
        assert!(cells[1].row.ci_low.is_infinite() && cells[1].row.ci_high.is_infinite());
        assert_eq!(cells[1].row.mean_risk, 2.0);

        let constant: Vec<_> = (0..5).map(|t| record(4, 16, t, 1.5, false)).collect();
        let c = &aggregate(&constant).unwrap()[0];
        assert_eq!(c.row.ci_high - c.row.ci_low, 0.0);

        let err = aggregate(&[record(4, 16, 0, 1.0, true)]).unwrap_err();
        assert!(matches!(err, Error::EmptyCell { m: 4, n: 16, excluded: 1 }));
    }

    #[test]
    fn ci_width_scales_with_inverse_root_trials() {
        use rand::Rng;
        let mut rng = crate::seed::rng_from_seed(11);
        let values: Vec<f64> = (0..200).map(|_| 1.0 + rng.random::<f64>()).collect();
        let width = |k: usize| {
            let rows: Vec<_> = values[..k].iter().enumerate().map(|(t, &v)| record(4, 16, t, v, false)).collect();
            let c = &aggregate(&rows).unwrap()[0];
            c.row.ci_high - c.row.ci_low
        };
        let ratio = width(50) / width(200);
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn aggregate_is_order_independent() {
        let config = small_config();
        let (mut records, _) = run_grid(&config).unwrap();
        let forward = aggregate(&records).unwrap();
        records.reverse();
        assert_eq!(aggregate(&records).unwrap(), forward);
    }
}
