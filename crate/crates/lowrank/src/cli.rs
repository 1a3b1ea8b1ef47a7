//! Command-line surface. Settings come from flags, then from the matching
//! section of `--config <file.json>`, then from defaults; everything is
//! validated before work starts.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 files and formats,
//! 4 numerical failure. Errors are reported on stderr as
//! `{"error": {"kind", "exit_code", "message", "field"?}}`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lowrank_core::allocation::{
    allocate_uniform, default_alpha_grid, generate_candidates, grid_search, AllocationConfig,
    DEFAULT_RETENTION,
};
use lowrank_core::model::{evaluate_with, metric_by_name, METRIC_NAMES};
use lowrank_core::spectral::{DEFAULT_BLOCK_ROWS, DEFAULT_RANK_TOL};
use lowrank_core::ActivationBatch;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{self, BenchConfig, BenchDtype, BenchReport, Shape};
use crate::calibration;
use crate::error::{Error, Result};
use crate::io::{load_model, DataSource};
use crate::manifest::{self, Provenance};
use crate::report;
use crate::tensors::StorageDtype;

pub const DEFAULT_SAMPLES: usize = 256;
pub const DEFAULT_METRIC: &str = "relative_frobenius";
pub const ALLOCATION_REPORT: &str = "allocation.json";

#[derive(Debug, Parser)]
#[command(
    name = "lowrank",
    version,
    about = "Activation-aware low-rank compression of layer stacks"
)]
pub struct Cli {
    /// JSON file with one section per command; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream calibration data through a model and store output covariances.
    Calibrate(CalibrateArgs),
    /// Allocate ranks and write a compressed bundle.
    Compress(CompressArgs),
    /// Print the validation error of a compressed bundle.
    Evaluate(EvaluateArgs),
    /// Compare the covariance route and whitening against a direct SVD.
    Bench(BenchArgs),
    /// Write loss-spectrum and effective-rank tables for a calibration run.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateArgs {
    /// Model file or `synthetic:` spec.
    #[arg(long)]
    pub model: Option<String>,
    /// Activation dump or `synthetic:` spec; defaults to the model spec for synthetic models.
    #[arg(long)]
    pub data: Option<String>,
    /// Number of calibration batches [default: 256].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Seed for batch selection [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output tensor file; the sidecar is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rows per accumulation block [default: 256].
    #[arg(long)]
    pub block_rows: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressArgs {
    /// Calibration tensor file written by `calibrate`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Model to compress [default: the model recorded with the stats].
    #[arg(long)]
    pub model: Option<String>,
    /// Target parameter ratio in (0, 1).
    #[arg(long)]
    pub ratio: Option<f64>,
    /// `uniform` or `dynamic` [default: dynamic].
    #[arg(long)]
    pub strategy: Option<String>,
    /// Retention ratio in (0, 1] [default: 0.5].
    #[arg(long)]
    pub delta: Option<f64>,
    /// Comma-separated α values [default: 0,0.1,...,1].
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    /// Validation data for the grid search.
    #[arg(long)]
    pub val: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Relative singular-value cutoff for numerical rank [default: 1e-10].
    #[arg(long)]
    pub rank_tol: Option<f64>,
    /// Seed recorded in the manifest [default: the calibration seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validation metric [default: relative_frobenius].
    #[arg(long)]
    pub metric: Option<String>,
    /// Factor storage type, f32 or f64 [default: f64].
    #[arg(long)]
    pub dtype: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Uncompressed model file or `synthetic:` spec.
    #[arg(long)]
    pub model: Option<String>,
    /// Directory written by `compress`.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Validation data, a dump or `synthetic:` spec.
    #[arg(long)]
    pub val: Option<String>,
    /// `relative_frobenius` or `mse` [default: relative_frobenius].
    #[arg(long)]
    pub metric: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchArgs {
    /// Comma-separated sizes, `d` or `lxmxn` [default: 128,1024,2048,4096].
    #[arg(long, value_delimiter = ',')]
    pub shapes: Option<Vec<String>>,
    /// Parameter ratio used to pick the rank [default: 0.6].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// fp32 or fp64 [default: fp32].
    #[arg(long)]
    pub dtype: Option<String>,
    /// Number of seeds per shape [default: 10].
    #[arg(long)]
    pub seeds: Option<u64>,
    /// First seed of the run [default: 0].
    #[arg(long)]
    pub first_seed: Option<u64>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional JSON report with per-shape summaries.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportArgs {
    /// Calibration tensor file written by `calibrate`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Output directory for `loss_spectrum.csv` and `erank.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Relative singular-value cutoff for numerical rank [default: 1e-10].
    #[arg(long)]
    pub rank_tol: Option<f64>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub threads: Option<usize>,
    #[serde(default)]
    pub calibrate: CalibrateArgs,
    #[serde(default)]
    pub compress: CompressArgs,
    #[serde(default)]
    pub evaluate: EvaluateArgs,
    #[serde(default)]
    pub bench: BenchArgs,
    #[serde(default)]
    pub report: ReportArgs,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
    }
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+) => {{
        let (mut flags, file) = ($flags, $file);
        $( if flags.$field.is_none() { flags.$field = file.$field; } )+
        flags
    }};
}

fn required<T>(value: Option<T>, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(field, "is required"))
}

fn positive(value: usize, field: &str) -> Result<usize> {
    if value == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(value)
}

fn check_ratio(ratio: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("ratio", format!("{ratio} is not in (0, 1)")));
    }
    Ok(ratio)
}

fn check_metric(metric: Option<String>) -> Result<String> {
    let metric = metric.unwrap_or_else(|| DEFAULT_METRIC.into());
    if metric_by_name(&metric).is_none() {
        return Err(Error::config(
            "metric",
            format!(
                "unknown metric `{metric}`; expected one of {}",
                METRIC_NAMES.join(", ")
            ),
        ));
    }
    Ok(metric)
}

fn check_rank_tol(tol: Option<f64>) -> Result<f64> {
    let tol = tol.unwrap_or(DEFAULT_RANK_TOL);
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::config("rank_tol", format!("{tol} is not in (0, 1)")));
    }
    Ok(tol)
}

fn emit(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}").map_err(|e| Error::io("<stdout>", e))
}

fn validation_batches(arg: &str) -> Result<Vec<ActivationBatch>> {
    let batches = DataSource::open(arg)?.all();
    if batches.is_empty() {
        return Err(Error::config("val", format!("`{arg}` holds no batches")));
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrateSettings {
    pub model: String,
    pub data: String,
    pub samples: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub block_rows: usize,
    pub threads: usize,
}

impl CalibrateSettings {
    pub fn resolve(args: CalibrateArgs, threads: usize) -> Result<Self> {
        let model = required(args.model, "model")?;
        let data = match args.data {
            Some(d) => d,
            None if crate::synthetic::SyntheticSpec::is_synthetic(&model) => model.clone(),
            None => {
                return Err(Error::config(
                    "data",
                    "is required unless the model is synthetic",
                ))
            }
        };
        Ok(Self {
            model,
            data,
            samples: positive(args.samples.unwrap_or(DEFAULT_SAMPLES), "samples")?,
            seed: args.seed.unwrap_or(0),
            out: required(args.out, "out")?,
            block_rows: positive(args.block_rows.unwrap_or(DEFAULT_BLOCK_ROWS), "block_rows")?,
            threads,
        })
    }

    pub fn run(&self) -> Result<serde_json::Value> {
        let model = load_model(&self.model)?;
        let selected = DataSource::open(&self.data)?.select(self.samples, self.seed);
        let run = calibration::run_calibration(
            &model,
            selected,
            self.samples,
            self.threads,
            self.block_rows,
        )?;
        let sidecar = calibration::save(&run, &self.model, self.seed, self.block_rows, &self.out)?;
        Ok(json!({
            "stats": self.out,
            "sidecar": calibration::sidecar_path(&self.out),
            "samples": sidecar.samples,
            "matrices": sidecar.matrices.len(),
            "checksum": sidecar.checksum,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressSettings {
    pub stats: PathBuf,
    pub model: Option<String>,
    pub ratio: f64,
    pub strategy: Strategy,
    pub delta: f64,
    pub alpha_grid: Vec<f64>,
    pub val: Option<String>,
    pub out: PathBuf,
    pub rank_tol: f64,
    pub seed: Option<u64>,
    pub metric: String,
    pub dtype: StorageDtype,
}

impl CompressSettings {
    pub fn resolve(args: CompressArgs) -> Result<Self> {
        let strategy = match args.strategy.as_deref().unwrap_or("dynamic") {
            "uniform" => Strategy::Uniform,
            "dynamic" => Strategy::Dynamic,
            other => {
                return Err(Error::config(
                    "strategy",
                    format!("`{other}` is not uniform or dynamic"),
                ))
            }
        };
        let settings = Self {
            stats: required(args.stats, "stats")?,
            model: args.model,
            ratio: check_ratio(required(args.ratio, "ratio")?)?,
            strategy,
            delta: args.delta.unwrap_or(DEFAULT_RETENTION),
            alpha_grid: args.alpha_grid.unwrap_or_else(default_alpha_grid),
            val: args.val,
            out: required(args.out, "out")?,
            rank_tol: check_rank_tol(args.rank_tol)?,
            seed: args.seed,
            metric: check_metric(args.metric)?,
            dtype: match args.dtype.as_deref() {
                None => StorageDtype::F64,
                Some(s) => StorageDtype::parse(s)
                    .ok_or_else(|| Error::config("dtype", format!("`{s}` is not f32 or f64")))?,
            },
        };
        if strategy == Strategy::Dynamic && settings.val.is_none() {
            return Err(Error::config("val", "is required for the dynamic strategy"));
        }
        settings.allocation_config().validate()?;
        Ok(settings)
    }

    pub fn allocation_config(&self) -> AllocationConfig {
        AllocationConfig {
            target_ratio: self.ratio,
            retention: self.delta,
            alpha_grid: self.alpha_grid.clone(),
            include_uniform: true,
        }
    }

    pub fn run(&self) -> Result<serde_json::Value> {
        let artifact = calibration::load(&self.stats)?;
        let model_arg = self
            .model
            .clone()
            .unwrap_or_else(|| artifact.sidecar.model.clone());
        let model = load_model(&model_arg)?;
        let mut comp = calibration::compressor(&artifact, self.rank_tol)?;
        let stats = comp.layer_stats()?;
        let cfg = self.allocation_config();
        let metric = metric_by_name(&self.metric).expect("validated metric");

        let (allocation, report) = match self.strategy {
            Strategy::Uniform => {
                let allocation = allocate_uniform(&stats, &cfg)?;
                (allocation, None)
            }
            Strategy::Dynamic => {
                let val = validation_batches(self.val.as_deref().expect("validated"))?;
                let candidates = generate_candidates(&stats, &cfg)?;
                let outcome = grid_search(&candidates, |c| {
                    let bundle = comp.compress(&model, c)?;
                    evaluate_with(&model, &bundle, &val, metric.as_ref())
                })?;
                let selected = candidates[outcome.selected].clone();
                let score = outcome.selected_score();
                (selected, Some((candidates, outcome, score)))
            }
        };
        let bundle = comp.compress(&model, &allocation)?;
        for w in bundle.warnings() {
            eprintln!("warning: {w}");
        }
        let provenance = Provenance {
            strategy: serde_json::to_value(self.strategy)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            alpha: allocation.label.alpha(),
            delta: self.delta,
            ratio: self.ratio,
            seed: self.seed.unwrap_or(artifact.sidecar.seed),
            budget: allocation.budget,
            stats_checksum: Some(artifact.sidecar.checksum.clone()),
        };
        let manifest = manifest::export(&bundle, provenance.clone(), self.dtype, &self.out)?;
        calibration::persist_spectra(&artifact, &mut comp)?;

        let allocation_report = report::AllocationReport {
            strategy: provenance.strategy.clone(),
            ratio: self.ratio,
            delta: self.delta,
            selected: allocation.label.to_string(),
            alpha: allocation.label.alpha(),
            budget: allocation.budget,
            validation_error: report.as_ref().map(|r| r.2).filter(|s| s.is_finite()),
            decompositions: comp.decompositions(),
            matrices: report::matrix_reports(&stats, &cfg, &allocation)?,
            candidates: report
                .as_ref()
                .map(|(c, o, _)| report::candidate_reports(c, o))
                .unwrap_or_default(),
        };
        let text =
            serde_json::to_string_pretty(&allocation_report).expect("report serializes") + "\n";
        crate::tensors::write_bytes(&self.out.join(ALLOCATION_REPORT), text.as_bytes())?;

        Ok(json!({
            "out": self.out,
            "strategy": provenance.strategy,
            "selected": allocation_report.selected,
            "validation_error": allocation_report.validation_error,
            "budget": allocation.budget,
            "parameter_count": manifest.parameter_count,
            "original_parameter_count": manifest.original_parameter_count,
            "decompositions": comp.decompositions(),
            "warnings": manifest.warnings.len(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateSettings {
    pub model: String,
    pub bundle: PathBuf,
    pub val: String,
    pub metric: String,
}

impl EvaluateSettings {
    pub fn resolve(args: EvaluateArgs) -> Result<Self> {
        Ok(Self {
            model: required(args.model, "model")?,
            bundle: required(args.bundle, "bundle")?,
            val: required(args.val, "val")?,
            metric: check_metric(args.metric)?,
        })
    }

    pub fn run(&self) -> Result<f64> {
        let model = load_model(&self.model)?;
        let (bundle, _) = manifest::import(&self.bundle)?;
        let val = validation_batches(&self.val)?;
        let metric = metric_by_name(&self.metric).expect("validated metric");
        Ok(evaluate_with(&model, &bundle, &val, metric.as_ref())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub config: BenchConfig,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

impl BenchSettings {
    pub fn resolve(args: BenchArgs, threads: usize) -> Result<Self> {
        let shapes = match args.shapes {
            None => bench::DEFAULT_SHAPES
                .iter()
                .map(|&d| Shape::square(d))
                .collect(),
            Some(list) => list
                .iter()
                .map(|s| {
                    Shape::parse(s)
                        .ok_or_else(|| Error::config("shapes", format!("cannot parse `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let dtype = match args.dtype.as_deref() {
            None => BenchDtype::Fp32,
            Some(s) => BenchDtype::parse(s)
                .ok_or_else(|| Error::config("dtype", format!("`{s}` is not fp32 or fp64")))?,
        };
        let config = BenchConfig {
            shapes,
            ratio: check_ratio(args.ratio.unwrap_or(bench::DEFAULT_RATIO))?,
            dtype,
            seeds: args.seeds.unwrap_or(bench::DEFAULT_SEEDS),
            first_seed: args.first_seed.unwrap_or(0),
            threads,
        };
        config.validate()?;
        Ok(Self {
            config,
            out: args.out,
            json: args.json,
        })
    }

    pub fn run(&self) -> Result<()> {
        let total = self.config.shapes.len() * self.config.seeds as usize;
        let mut done = 0;
        let rows = bench::run_stability_suite(&self.config, |r| {
            done += 1;
            eprintln!(
                "[{done}/{total}] {} seed {}: {} ({:.1}s)",
                r.shape(),
                r.seed,
                r.status,
                r.seconds
            );
        })?;
        match &self.out {
            Some(path) => {
                let mut buf = Vec::new();
                bench::write_csv(&rows, &mut buf)?;
                crate::tensors::write_bytes(path, &buf)?;
            }
            None => bench::write_csv(&rows, std::io::stdout().lock())?,
        }
        if let Some(path) = &self.json {
            let report = BenchReport {
                config: self.config.clone(),
                summary: bench::summarize(&rows),
                rows,
            };
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            crate::tensors::write_bytes(path, text.as_bytes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSettings {
    pub stats: PathBuf,
    pub out: PathBuf,
    pub rank_tol: f64,
}

impl ReportSettings {
    pub fn resolve(args: ReportArgs) -> Result<Self> {
        Ok(Self {
            stats: required(args.stats, "stats")?,
            out: required(args.out, "out")?,
            rank_tol: check_rank_tol(args.rank_tol)?,
        })
    }

    pub fn run(&self) -> Result<serde_json::Value> {
        let artifact = calibration::load(&self.stats)?;
        let mut comp = calibration::compressor(&artifact, self.rank_tol)?;
        let stats = comp.layer_stats()?;
        let mut spectra = Vec::new();
        let spectrum_rows = report::write_loss_spectra(&stats, &mut spectra)?;
        let mut erank = Vec::new();
        let erank_rows = report::write_erank_table(&stats, &mut erank)?;
        let spectra_path = self.out.join("loss_spectrum.csv");
        let erank_path = self.out.join("erank.csv");
        crate::tensors::write_bytes(&spectra_path, &spectra)?;
        crate::tensors::write_bytes(&erank_path, &erank)?;
        calibration::persist_spectra(&artifact, &mut comp)?;
        Ok(json!({
            "loss_spectrum": spectra_path,
            "loss_spectrum_rows": spectrum_rows,
            "erank": erank_path,
            "erank_rows": erank_rows,
        }))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::read(path)?,
        None => ConfigFile::default(),
    };
    let threads = positive(cli.threads.or(file.threads).unwrap_or(1), "threads")?;
    match cli.command {
        Command::Calibrate(a) => {
            let a = overlay!(
                a,
                file.calibrate,
                model,
                data,
                samples,
                seed,
                out,
                block_rows
            );
            emit(&CalibrateSettings::resolve(a, threads)?.run()?)
        }
        Command::Compress(a) => {
            let a = overlay!(
                a,
                file.compress,
                stats,
                model,
                ratio,
                strategy,
                delta,
                alpha_grid,
                val,
                out,
                rank_tol,
                seed,
                metric,
                dtype
            );
            emit(&CompressSettings::resolve(a)?.run()?)
        }
        Command::Evaluate(a) => {
            let a = overlay!(a, file.evaluate, model, bundle, val, metric);
            let score = EvaluateSettings::resolve(a)?.run()?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "{score:.6}").map_err(|e| Error::io("<stdout>", e))
        }
        Command::Bench(a) => {
            let a = overlay!(a, file.bench, shapes, ratio, dtype, seeds, first_seed, out, json);
            BenchSettings::resolve(a, threads)?.run()
        }
        Command::Report(a) => {
            let a = overlay!(a, file.report, stats, out, rank_tol);
            emit(&ReportSettings::resolve(a)?.run()?)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let body = json!({
                "error": {
                    "kind": "usage",
                    "exit_code": 2,
                    "message": e.render().to_string().trim_end(),
                }
            });
            eprintln!("{body}");
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
