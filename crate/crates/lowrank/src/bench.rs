//! Numerical-stability benchmark: optimal loss from a direct SVD against the
//! covariance route and the Cholesky-whitening comparator on random
//! Gaussian problems.

use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use lowrank_core::dense::round_to_f32;
use lowrank_core::oracle::{singular_values, trailing_norm};
use lowrank_core::spectral::DEFAULT_RANK_TOL;
use lowrank_core::whitening::{factor_residual, whitening_factors};
use lowrank_core::{optimal_factors, ActivationBatch, CovarianceAccumulator, WeightMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::gaussian;

pub const DEFAULT_SHAPES: [usize; 4] = [128, 1024, 2048, 4096];
pub const DEFAULT_RATIO: f64 = 0.6;
pub const DEFAULT_SEEDS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BenchDtype {
    #[default]
    Fp32,
    Fp64,
}

impl BenchDtype {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fp32" | "f32" => Some(BenchDtype::Fp32),
            "fp64" | "f64" => Some(BenchDtype::Fp64),
            _ => None,
        }
    }
}

impl fmt::Display for BenchDtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchDtype::Fp32 => "fp32",
            BenchDtype::Fp64 => "fp64",
        })
    }
}

/// `X` is `l × m`, `W` is `m × n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub l: usize,
    pub m: usize,
    pub n: usize,
}

impl Shape {
    pub fn square(d: usize) -> Self {
        Self { l: d, m: d, n: d }
    }

    /// `d` for `d×d×d`, or `l x m x n`.
    pub fn parse(s: &str) -> Option<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<_>>()?;
        match parts[..] {
            [d] if d > 0 => Some(Self::square(d)),
            [l, m, n] if l > 0 && m > 0 && n > 0 => Some(Self { l, m, n }),
            _ => None,
        }
    }

    /// `⌊ρ·m·n/(m+n)⌋`, at least 1.
    pub fn rank(&self, ratio: f64) -> usize {
        let k = (ratio * (self.m * self.n) as f64 / (self.m + self.n) as f64).floor() as usize;
        k.clamp(1, self.m.min(self.n))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.l, self.m, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub shapes: Vec<Shape>,
    pub ratio: f64,
    pub dtype: BenchDtype,
    /// Seeds `first_seed .. first_seed + seeds`.
    pub seeds: u64,
    pub first_seed: u64,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shapes: DEFAULT_SHAPES.iter().map(|&d| Shape::square(d)).collect(),
            ratio: DEFAULT_RATIO,
            dtype: BenchDtype::Fp32,
            seeds: DEFAULT_SEEDS,
            first_seed: 0,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::config("shapes", "at least one shape is required"));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::config("ratio", "must lie in (0, 1)"));
        }
        if self.seeds == 0 {
            return Err(Error::config("seeds", "must be positive"));
        }
        Ok(())
    }
}

/// One benchmark row. Gaps are `method − oracle`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub shape_l: usize,
    pub shape_m: usize,
    pub shape_n: usize,
    pub ratio: f64,
    pub dtype: BenchDtype,
    pub seed: u64,
    pub rank: usize,
    pub oracle: Option<f64>,
    pub swift: Option<f64>,
    pub swift_gap: Option<f64>,
    pub whitening: Option<f64>,
    pub whitening_gap: Option<f64>,
    pub jitter_applied: bool,
    pub status: String,
    pub seconds: f64,
}

impl StabilityResult {
    pub fn shape(&self) -> Shape {
        Shape {
            l: self.shape_l,
            m: self.shape_m,
            n: self.shape_n,
        }
    }
}

/// Problem data for a row: entries i.i.d. N(0, 1), rounded through `f32`
/// for the fp32 dtype. Each `(shape, seed)` has its own stream.
pub fn problem(shape: Shape, dtype: BenchDtype, seed: u64) -> (ActivationBatch, WeightMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((shape.l as u64) << 42) ^ ((shape.m as u64) << 21) ^ shape.n as u64);
    let mut x = gaussian(&mut rng, shape.l, shape.m);
    let mut w = gaussian(&mut rng, shape.m, shape.n);
    if dtype == BenchDtype::Fp32 {
        x = round_to_f32(x.as_ref());
        w = round_to_f32(w.as_ref());
    }
    (
        ActivationBatch::new(x).expect("finite"),
        WeightMatrix::new("w", w).expect("finite"),
    )
}

/// Runs all three methods on one problem. Failures are recorded in
/// `status` rather than returned.
pub fn run_row(shape: Shape, ratio: f64, dtype: BenchDtype, seed: u64) -> StabilityResult {
    let start = Instant::now();
    let k = shape.rank(ratio);
    let (x, w) = problem(shape, dtype, seed);
    let y = x.matrix() * w.matrix();
    let mut row = StabilityResult {
        shape_l: shape.l,
        shape_m: shape.m,
        shape_n: shape.n,
        ratio,
        dtype,
        seed,
        rank: k,
        oracle: None,
        swift: None,
        swift_gap: None,
        whitening: None,
        whitening_gap: None,
        jitter_applied: false,
        status: String::new(),
        seconds: 0.0,
    };
    let mut failures = Vec::new();

    match singular_values(y.as_ref()) {
        Ok(sigma) => row.oracle = Some(trailing_norm(&sigma, k)),
        Err(e) => failures.push(format!("oracle: {e}")),
    }

    let swift = (|| {
        let mut acc = CovarianceAccumulator::new(shape.n);
        acc.accumulate(&x, &w)?;
        let spectrum = acc.decompose(DEFAULT_RANK_TOL)?;
        let factors = optimal_factors(&w, &spectrum, k)?;
        factor_residual(&x, y.as_ref(), &factors)
    })();
    match swift {
        Ok(v) => row.swift = Some(v),
        Err(e) => failures.push(format!("swift: {e}")),
    }

    let whitening = match dtype {
        BenchDtype::Fp32 => whitening_factors::<f32>(&x, &w, k),
        BenchDtype::Fp64 => whitening_factors::<f64>(&x, &w, k),
    }
    .and_then(|out| {
        row.jitter_applied = out.jitter.is_some();
        factor_residual(&x, y.as_ref(), &out.factors)
    });
    match whitening {
        Ok(v) => row.whitening = Some(v),
        Err(e) => failures.push(format!("whitening: {e}")),
    }

    if let Some(o) = row.oracle {
        row.swift_gap = row.swift.map(|s| s - o);
        row.whitening_gap = row.whitening.map(|v| v - o);
    }
    row.status = if failures.is_empty() {
        "ok".into()
    } else {
        failures.join("; ")
    };
    row.seconds = start.elapsed().as_secs_f64();
    row
}

/// Every `(shape, seed)` row, in shape-then-seed order. Rows run on up to
/// `threads` workers; each row is single-threaded.
pub fn run_stability_suite(
    cfg: &BenchConfig,
    mut progress: impl FnMut(&StabilityResult) + Send,
) -> Result<Vec<StabilityResult>> {
    cfg.validate()?;
    let jobs: Vec<(Shape, u64)> = cfg
        .shapes
        .iter()
        .flat_map(|&s| (cfg.first_seed..cfg.first_seed + cfg.seeds).map(move |seed| (s, seed)))
        .collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = std::sync::mpsc::channel();
    let workers = cfg.threads.clamp(1, jobs.len());
    let mut results: Vec<Option<StabilityResult>> = vec![None; jobs.len()];
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next) = (&jobs, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(shape, seed)) = jobs.get(i) else {
                    break;
                };
                let row = run_row(shape, cfg.ratio, cfg.dtype, seed);
                if tx.send((i, row)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, row) in rx {
            progress(&row);
            results[i] = Some(row);
        }
    });
    Ok(results
        .into_iter()
        .map(|r| r.expect("every job reports"))
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.10e}"))
}

pub const CSV_HEADER: [&str; 13] = [
    "shape_l",
    "shape_m",
    "shape_n",
    "ratio",
    "dtype",
    "seed",
    "oracle",
    "swift",
    "swift_gap",
    "whitening",
    "whitening_gap",
    "jitter_applied",
    "status",
];

pub fn write_csv<W: Write>(rows: &[StabilityResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::format("<bench csv>", e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.shape_l.to_string(),
            r.shape_m.to_string(),
            r.shape_n.to_string(),
            r.ratio.to_string(),
            r.dtype.to_string(),
            r.seed.to_string(),
            opt(r.oracle),
            opt(r.swift),
            opt(r.swift_gap),
            opt(r.whitening),
            opt(r.whitening_gap),
            r.jitter_applied.to_string(),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<bench csv>", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub shape: Shape,
    pub rows: usize,
    pub failed: usize,
    pub mean_oracle: f64,
    pub mean_swift_gap: f64,
    pub max_swift_gap: f64,
    pub max_swift_relative_gap: f64,
    pub mean_whitening_gap: f64,
    /// Rows where `swift_gap ≤ whitening_gap`.
    pub swift_not_worse: usize,
    pub jitter_rows: usize,
}

pub fn summarize(rows: &[StabilityResult]) -> Vec<ShapeSummary> {
    let mut shapes: Vec<Shape> = Vec::new();
    for r in rows {
        if !shapes.contains(&r.shape()) {
            shapes.push(r.shape());
        }
    }
    shapes
        .into_iter()
        .map(|shape| {
            let group: Vec<&StabilityResult> = rows.iter().filter(|r| r.shape() == shape).collect();
            let ok: Vec<&&StabilityResult> = group
                .iter()
                .filter(|r| r.swift_gap.is_some() && r.whitening_gap.is_some())
                .collect();
            let mean = |f: &dyn Fn(&StabilityResult) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            ShapeSummary {
                shape,
                rows: group.len(),
                failed: group.len() - ok.len(),
                mean_oracle: mean(&|r| r.oracle.unwrap_or(f64::NAN)),
                mean_swift_gap: mean(&|r| r.swift_gap.unwrap_or(f64::NAN)),
                max_swift_gap: ok
                    .iter()
                    .map(|r| r.swift_gap.unwrap_or(0.0).abs())
                    .fold(0.0, f64::max),
                max_swift_relative_gap: ok
                    .iter()
                    .map(|r| (r.swift_gap.unwrap_or(0.0) / r.oracle.unwrap_or(1.0)).abs())
                    .fold(0.0, f64::max),
                mean_whitening_gap: mean(&|r| r.whitening_gap.unwrap_or(f64::NAN)),
                swift_not_worse: ok
                    .iter()
                    .filter(|r| {
                        r.swift_gap.unwrap_or(f64::INFINITY)
                            <= r.whitening_gap.unwrap_or(f64::NEG_INFINITY)
                    })
                    .count(),
                jitter_rows: group.iter().filter(|r| r.jitter_applied).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub summary: Vec<ShapeSummary>,
    pub rows: Vec<StabilityResult>,
}
