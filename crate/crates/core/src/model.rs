//! A small dense layer stack with calibration hooks, compression and
//! evaluation.
//!
//! Each [`Layer`] applies its modules in order, each followed by the layer's
//! pointwise nonlinearity, and optionally adds its input back. Hooked forward
//! passes stream every module output into that module's
//! [`CovarianceAccumulator`] and record per-layer input/output cosine
//! statistics for importance.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use faer::{Mat, MatRef};

use crate::allocation::{CosineStats, LayerStats, MatrixId, RankAllocation};
use crate::dense::{frobenius, frobenius_distance};
use crate::spectral::{
    optimal_factors, ActivationBatch, CovarianceAccumulator, LowRankFactors, Spectrum,
    WeightMatrix, DEFAULT_RANK_TOL,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(&self, m: &mut Mat<f64>) {
        let f: fn(f64) -> f64 = match self {
            Activation::Identity => return,
            Activation::Relu => |v| v.max(0.0),
            Activation::Tanh => libm::tanh,
        };
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                m[(i, j)] = f(m[(i, j)]);
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    modules: Vec<WeightMatrix>,
    activation: Activation,
    residual: bool,
}

impl Layer {
    /// Module names must be distinct and consecutive shapes must chain; a
    /// residual layer must map its input width back to itself.
    pub fn new(modules: Vec<WeightMatrix>, activation: Activation, residual: bool) -> Result<Self> {
        if modules.is_empty() {
            return Err(Error::Empty("layer modules"));
        }
        for (i, pair) in modules.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::ShapeMismatch {
                    context: "consecutive layer modules",
                    left: pair[0].shape(),
                    right: pair[1].shape(),
                });
            }
            if modules[..=i].iter().any(|m| m.name() == pair[1].name()) {
                return Err(Error::config(
                    "module name",
                    format!("duplicate `{}`", pair[1].name()),
                ));
            }
        }
        let layer = Self {
            modules,
            activation,
            residual,
        };
        if residual && layer.in_dim() != layer.out_dim() {
            return Err(Error::ShapeMismatch {
                context: "residual layer",
                left: (layer.in_dim(), layer.in_dim()),
                right: (layer.in_dim(), layer.out_dim()),
            });
        }
        Ok(layer)
    }

    pub fn modules(&self) -> &[WeightMatrix] {
        &self.modules
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn in_dim(&self) -> usize {
        self.modules[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.modules[self.modules.len() - 1].cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelMetadata {
    pub name: String,
    /// Precision of the source weights, e.g. `"f32"`.
    pub dtype: String,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    layers: Vec<Layer>,
    metadata: ModelMetadata,
}

fn check_width(layer: usize, expected: usize, got: (usize, usize)) -> Result<()> {
    if got.1 != expected {
        return Err(Error::ShapeMismatch {
            context: "layer input",
            left: got,
            right: (expected, expected),
        }
        .in_layer(layer));
    }
    Ok(())
}

impl ModelBundle {
    pub fn new(layers: Vec<Layer>, metadata: ModelMetadata) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("model layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    context: "adjacent layers",
                    left: (pair[0].in_dim(), pair[0].out_dim()),
                    right: (pair[1].in_dim(), pair[1].out_dim()),
                }
                .in_layer(i + 1));
            }
        }
        Ok(Self { layers, metadata })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    /// Input width of the first layer.
    pub fn hidden_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Every compressible matrix in forward order.
    pub fn matrices(&self) -> impl Iterator<Item = (MatrixId, &WeightMatrix)> {
        self.layers.iter().enumerate().flat_map(|(i, layer)| {
            layer
                .modules
                .iter()
                .map(move |w| (MatrixId::new(i, w.name()), w))
        })
    }

    pub fn matrix_count(&self) -> usize {
        self.layers.iter().map(|l| l.modules.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().map(|(_, w)| w.parameter_count()).sum()
    }

    /// Runs the stack; with `hooks`, also streams every module output and
    /// layer cosine statistic into the run (the sample count is left alone).
    pub fn forward(
        &self,
        input: &ActivationBatch,
        mut hooks: Option<&mut CalibrationRun>,
    ) -> Result<ActivationBatch> {
        if let Some(run) = hooks.as_deref() {
            run.check_model(self)?;
        }
        let mut h = input.matrix().to_owned();
        let mut slot = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            check_width(li, layer.in_dim(), (h.nrows(), h.ncols()))?;
            let mut z = h.clone();
            for w in &layer.modules {
                let mut y = z.as_ref() * w.matrix();
                if let Some(run) = hooks.as_deref_mut() {
                    run.accumulators[slot]
                        .accumulate_outputs(y.as_ref())
                        .map_err(|e| e.in_layer(li))?;
                }
                layer.activation.apply(&mut y);
                z = y;
                slot += 1;
            }
            if layer.residual {
                z += &h;
            }
            if let Some(run) = hooks.as_deref_mut() {
                let before = ActivationBatch::new(h).map_err(|e| e.in_layer(li))?;
                let after = ActivationBatch::new(z.clone()).map_err(|e| e.in_layer(li))?;
                run.cosine[li]
                    .observe(&before, &after)
                    .map_err(|e| e.in_layer(li))?;
            }
            h = z;
        }
        ActivationBatch::new(h)
    }
}

/// Per-matrix covariance accumulators and per-layer cosine statistics from
/// hooked forward passes.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    ids: Vec<MatrixId>,
    shapes: Vec<(usize, usize)>,
    accumulators: Vec<CovarianceAccumulator>,
    cosine: Vec<CosineStats>,
    samples: usize,
    source: String,
}

impl CalibrationRun {
    /// An empty run shaped for `model`.
    pub fn for_model(model: &ModelBundle, source: impl Into<String>) -> Self {
        let (ids, shapes): (Vec<_>, Vec<_>) =
            model.matrices().map(|(id, w)| (id, w.shape())).unzip();
        Self {
            accumulators: shapes
                .iter()
                .map(|s| CovarianceAccumulator::new(s.1))
                .collect(),
            cosine: alloc::vec![CosineStats::default(); model.layers.len()],
            ids,
            shapes,
            samples: 0,
            source: source.into(),
        }
    }

    /// Rebuilds a stored run. Accumulators and shapes follow `ids`.
    pub fn from_parts(
        ids: Vec<MatrixId>,
        shapes: Vec<(usize, usize)>,
        accumulators: Vec<CovarianceAccumulator>,
        cosine: Vec<CosineStats>,
        samples: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("calibration matrices"));
        }
        if shapes.len() != ids.len() || accumulators.len() != ids.len() {
            return Err(Error::config(
                "calibration run",
                "one shape and accumulator per matrix",
            ));
        }
        for (s, acc) in shapes.iter().zip(&accumulators) {
            if acc.dim() != s.1 {
                return Err(Error::ShapeMismatch {
                    context: "stored accumulator vs matrix",
                    left: (acc.dim(), acc.dim()),
                    right: *s,
                });
            }
        }
        let layers = ids.iter().map(|id| id.layer).max().unwrap_or(0) + 1;
        if cosine.len() != layers {
            return Err(Error::config(
                "calibration run",
                "one cosine statistic per layer",
            ));
        }
        Ok(Self {
            ids,
            shapes,
            accumulators,
            cosine,
            samples,
            source: source.into(),
        })
    }

    /// Sets the row-block size used when streaming outputs.
    pub fn with_block_rows(mut self, block_rows: usize) -> Self {
        self.accumulators = self
            .accumulators
            .into_iter()
            .map(|a| a.with_block_rows(block_rows))
            .collect();
        self
    }

    fn check_model(&self, model: &ModelBundle) -> Result<()> {
        let matches = model.matrix_count() == self.ids.len()
            && model.layers.len() == self.cosine.len()
            && model
                .matrices()
                .zip(self.ids.iter().zip(&self.shapes))
                .all(|((id, w), (rid, s))| &id == rid && w.shape() == *s);
        if matches {
            Ok(())
        } else {
            Err(Error::config(
                "calibration run",
                "does not match the model's matrices",
            ))
        }
    }

    pub fn ids(&self) -> &[MatrixId] {
        &self.ids
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn accumulators(&self) -> &[CovarianceAccumulator] {
        &self.accumulators
    }

    pub fn accumulator(&self, id: &MatrixId) -> Option<&CovarianceAccumulator> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|p| &self.accumulators[p])
    }

    pub fn cosine_stats(&self) -> &[CosineStats] {
        &self.cosine
    }

    pub fn layer_importance(&self, layer: usize) -> Result<f64> {
        self.cosine
            .get(layer)
            .ok_or(Error::config("layer", "index out of range"))?
            .importance()
            .map_err(|e| e.in_layer(layer))
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn set_source(&mut self, source: impl Into<String>) {
        self.source = source.into();
    }

    /// Runs one hooked forward pass and counts it as a sample.
    pub fn observe(
        &mut self,
        model: &ModelBundle,
        batch: &ActivationBatch,
    ) -> Result<ActivationBatch> {
        let out = model.forward(batch, Some(self))?;
        self.samples += 1;
        Ok(out)
    }

    /// Adds another run over the same matrices (e.g. a worker's partial).
    pub fn merge(&mut self, other: &CalibrationRun) -> Result<()> {
        if self.ids != other.ids
            || self.shapes != other.shapes
            || self.cosine.len() != other.cosine.len()
        {
            return Err(Error::config(
                "calibration merge",
                "runs cover different matrices",
            ));
        }
        for (a, b) in self.accumulators.iter_mut().zip(&other.accumulators) {
            a.merge(b)?;
        }
        for (a, b) in self.cosine.iter_mut().zip(&other.cosine) {
            a.merge(b);
        }
        self.samples += other.samples;
        Ok(())
    }
}

/// A stream of calibration batches.
pub trait BatchSource {
    /// `Ok(None)` once exhausted.
    fn next_batch(&mut self) -> Result<Option<ActivationBatch>>;

    fn describe(&self) -> String {
        "unnamed".to_string()
    }
}

impl<I: Iterator<Item = ActivationBatch>> BatchSource for core::iter::Fuse<I> {
    fn next_batch(&mut self) -> Result<Option<ActivationBatch>> {
        Ok(self.next())
    }

    fn describe(&self) -> String {
        "iterator".to_string()
    }
}

/// Runs `samples` hooked forward passes drawn from `source`.
pub fn calibrate<S: BatchSource + ?Sized>(
    model: &ModelBundle,
    source: &mut S,
    samples: usize,
) -> Result<CalibrationRun> {
    let run = CalibrationRun::for_model(model, source.describe());
    calibrate_into(run, model, source, samples)
}

/// Like [`calibrate`], continuing from an existing run.
pub fn calibrate_into<S: BatchSource + ?Sized>(
    mut run: CalibrationRun,
    model: &ModelBundle,
    source: &mut S,
    samples: usize,
) -> Result<CalibrationRun> {
    if samples == 0 {
        return Err(Error::config("samples", "must be positive"));
    }
    run.check_model(model)?;
    let mut width = None;
    for s in 0..samples {
        let batch = source
            .next_batch()
            .map_err(|e| Error::Sample {
                sample: s,
                source: Box::new(e),
            })?
            .ok_or(Error::DataExhausted {
                needed: samples,
                got: s,
            })?;
        let w = *width.get_or_insert(batch.width());
        if batch.width() != w || w != model.hidden_dim() {
            return Err(Error::Sample {
                sample: s,
                source: Box::new(Error::ShapeMismatch {
                    context: "calibration sample",
                    left: (batch.rows(), batch.width()),
                    right: (batch.rows(), model.hidden_dim()),
                }),
            });
        }
        run.observe(model, &batch).map_err(|e| Error::Sample {
            sample: s,
            source: Box::new(e),
        })?;
    }
    Ok(run)
}

/// Decomposes each accumulator at most once and builds compressed bundles
/// for any number of allocations.
#[derive(Debug)]
pub struct Compressor {
    run: CalibrationRun,
    rank_tol: f64,
    spectra: Vec<Option<Spectrum>>,
    decompositions: usize,
}

impl Compressor {
    pub fn new(run: CalibrationRun) -> Self {
        Self::with_rank_tol(run, DEFAULT_RANK_TOL)
    }

    pub fn with_rank_tol(run: CalibrationRun, rank_tol: f64) -> Self {
        let n = run.ids.len();
        Self {
            run,
            rank_tol,
            spectra: (0..n).map(|_| None).collect(),
            decompositions: 0,
        }
    }

    /// Starts from previously computed spectra (one per matrix, in run
    /// order); none of them count as decompositions.
    pub fn with_spectra(
        run: CalibrationRun,
        rank_tol: f64,
        spectra: Vec<Spectrum>,
    ) -> Result<Self> {
        if spectra.len() != run.ids.len() {
            return Err(Error::config("spectra", "one per calibrated matrix"));
        }
        for (s, shape) in spectra.iter().zip(&run.shapes) {
            if s.dim() != shape.1 {
                return Err(Error::ShapeMismatch {
                    context: "cached spectrum vs matrix",
                    left: (s.dim(), s.numerical_rank()),
                    right: *shape,
                });
            }
        }
        Ok(Self {
            run,
            rank_tol,
            spectra: spectra.into_iter().map(Some).collect(),
            decompositions: 0,
        })
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    pub fn run(&self) -> &CalibrationRun {
        &self.run
    }

    /// Number of eigendecompositions performed so far.
    pub fn decompositions(&self) -> usize {
        self.decompositions
    }

    pub fn spectrum(&mut self, index: usize) -> Result<&Spectrum> {
        if self.spectra[index].is_none() {
            let spectrum = self.run.accumulators[index]
                .decompose(self.rank_tol)
                .map_err(|e| e.in_layer(self.run.ids[index].layer))?;
            self.decompositions += 1;
            self.spectra[index] = Some(spectrum);
        }
        Ok(self.spectra[index].as_ref().expect("spectrum cached above"))
    }

    pub fn spectra(&mut self) -> Result<Vec<&Spectrum>> {
        for i in 0..self.spectra.len() {
            self.spectrum(i)?;
        }
        Ok(self
            .spectra
            .iter()
            .map(|s| s.as_ref().expect("all cached"))
            .collect())
    }

    /// Allocation inputs for every matrix, in run order.
    pub fn layer_stats(&mut self) -> Result<Vec<LayerStats>> {
        self.spectra()?;
        (0..self.run.ids.len())
            .map(|i| {
                let id = self.run.ids[i].clone();
                let (m, n) = self.run.shapes[i];
                let spectrum = self.spectra[i].as_ref().expect("all cached");
                if spectrum.numerical_rank() == 0 {
                    return Err(Error::DegenerateOutput {
                        matrix: id.to_string(),
                    });
                }
                let beta = self.run.layer_importance(id.layer)?;
                LayerStats::from_spectrum(id, m, n, spectrum, beta)
            })
            .collect()
    }

    /// Factors every matrix at its allocated rank. Ranks above a matrix's
    /// numerical rank are capped and reported in the bundle's warnings.
    pub fn compress(
        &mut self,
        model: &ModelBundle,
        allocation: &RankAllocation,
    ) -> Result<CompressedBundle> {
        self.run.check_model(model)?;
        if allocation.ranks.len() != self.run.ids.len() {
            return Err(Error::config(
                "allocation",
                format!(
                    "{} ranks for {} matrices",
                    allocation.ranks.len(),
                    self.run.ids.len()
                ),
            ));
        }
        let mut warnings = Vec::new();
        let mut layers: Vec<CompressedLayer> = model
            .layers
            .iter()
            .map(|l| CompressedLayer {
                modules: Vec::with_capacity(l.modules.len()),
                activation: l.activation,
                residual: l.residual,
            })
            .collect();
        for (i, (id, w)) in model.matrices().enumerate() {
            let requested = allocation.ranks[i];
            let spectrum = self.spectrum(i)?;
            let r = spectrum.numerical_rank();
            if r == 0 {
                return Err(Error::DegenerateOutput {
                    matrix: id.to_string(),
                });
            }
            if requested == 0 {
                return Err(Error::RankOutOfRange {
                    k: 0,
                    min: 1,
                    max: w.rows().min(w.cols()),
                }
                .in_layer(id.layer));
            }
            let k = requested.min(r);
            if k < requested {
                warnings.push(format!(
                    "{id}: requested rank {requested} exceeds numerical rank {r}; capped"
                ));
            }
            let factors = optimal_factors(w, spectrum, k).map_err(|e| e.in_layer(id.layer))?;
            let loss = spectrum.loss_at(k)?;
            layers[id.layer].modules.push(CompressedModule {
                id,
                original_shape: w.shape(),
                requested_rank: requested,
                loss,
                factors,
            });
        }
        Ok(CompressedBundle {
            layers,
            metadata: model.metadata.clone(),
            allocation: allocation.clone(),
            warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModule {
    pub id: MatrixId,
    pub original_shape: (usize, usize),
    /// Rank asked for by the allocation; `factors.rank()` may be lower.
    pub requested_rank: usize,
    /// `ε*_k` on the calibration data.
    pub loss: f64,
    pub factors: LowRankFactors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub modules: Vec<CompressedModule>,
    pub activation: Activation,
    pub residual: bool,
}

/// A layer stack whose weights are stored as factor pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBundle {
    layers: Vec<CompressedLayer>,
    metadata: ModelMetadata,
    allocation: RankAllocation,
    warnings: Vec<String>,
}

impl CompressedBundle {
    pub fn from_parts(
        layers: Vec<CompressedLayer>,
        metadata: ModelMetadata,
        allocation: RankAllocation,
        warnings: Vec<String>,
    ) -> Result<Self> {
        if layers.is_empty() || layers.iter().any(|l| l.modules.is_empty()) {
            return Err(Error::Empty("compressed layers"));
        }
        let modules: Vec<&CompressedModule> = layers.iter().flat_map(|l| &l.modules).collect();
        if modules.len() != allocation.ranks.len() {
            return Err(Error::config(
                "allocation",
                "one rank per compressed matrix",
            ));
        }
        for (m, &k) in modules.iter().zip(&allocation.ranks) {
            if m.factors.rows() != m.original_shape.0 || m.factors.cols() != m.original_shape.1 {
                return Err(Error::ShapeMismatch {
                    context: "factors vs original shape",
                    left: (m.factors.rows(), m.factors.cols()),
                    right: m.original_shape,
                });
            }
            if m.requested_rank != k || m.factors.rank() > k {
                return Err(Error::config(
                    "rank",
                    format!(
                        "{}: factors of rank {} under allocation {k}",
                        m.id,
                        m.factors.rank()
                    ),
                ));
            }
        }
        Ok(Self {
            layers,
            metadata,
            allocation,
            warnings,
        })
    }

    pub fn layers(&self) -> &[CompressedLayer] {
        &self.layers
    }

    pub fn modules(&self) -> impl Iterator<Item = &CompressedModule> {
        self.layers.iter().flat_map(|l| &l.modules)
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn allocation(&self) -> &RankAllocation {
        &self.allocation
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `Σ k_i (m_i + n_i)`.
    pub fn parameter_count(&self) -> usize {
        self.modules().map(|m| m.factors.parameter_count()).sum()
    }

    pub fn original_parameter_count(&self) -> usize {
        self.modules()
            .map(|m| m.original_shape.0 * m.original_shape.1)
            .sum()
    }

    /// Each module computes `(h·A)·B`.
    pub fn forward(&self, input: &ActivationBatch) -> Result<ActivationBatch> {
        let mut h = input.matrix().to_owned();
        for (li, layer) in self.layers.iter().enumerate() {
            check_width(li, layer.modules[0].factors.rows(), (h.nrows(), h.ncols()))?;
            let mut z = h.clone();
            for m in &layer.modules {
                let mut y = m.factors.apply(z.as_ref()).map_err(|e| e.in_layer(li))?;
                layer.activation.apply(&mut y);
                z = y;
            }
            if layer.residual {
                z += &h;
            }
            h = z;
        }
        ActivationBatch::new(h)
    }
}

/// Per-batch discrepancy between reference and compressed outputs.
pub trait Metric {
    fn name(&self) -> &'static str;
    fn batch_score(&self, reference: MatRef<'_, f64>, approx: MatRef<'_, f64>) -> f64;
}

/// `‖O − Ô‖_F / ‖O‖_F`; zero when both are zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct RelativeFrobenius;

impl Metric for RelativeFrobenius {
    fn name(&self) -> &'static str {
        "relative_frobenius"
    }

    fn batch_score(&self, reference: MatRef<'_, f64>, approx: MatRef<'_, f64>) -> f64 {
        let num = frobenius_distance(reference, approx);
        let den = frobenius(reference);
        if den == 0.0 {
            if num == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            num / den
        }
    }
}

/// Mean squared entry error.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSquared;

impl Metric for MeanSquared {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn batch_score(&self, reference: MatRef<'_, f64>, approx: MatRef<'_, f64>) -> f64 {
        let count = (reference.nrows() * reference.ncols()).max(1) as f64;
        let d = frobenius_distance(reference, approx);
        d * d / count
    }
}

pub const METRIC_NAMES: [&str; 2] = ["relative_frobenius", "mse"];

pub fn metric_by_name(name: &str) -> Option<Box<dyn Metric>> {
    match name {
        "relative_frobenius" => Some(Box::new(RelativeFrobenius)),
        "mse" => Some(Box::new(MeanSquared)),
        _ => None,
    }
}

/// Mean relative Frobenius error of the compressed outputs over `validation`.
pub fn evaluate(
    original: &ModelBundle,
    compressed: &CompressedBundle,
    validation: &[ActivationBatch],
) -> Result<f64> {
    evaluate_with(original, compressed, validation, &RelativeFrobenius)
}

pub fn evaluate_with(
    original: &ModelBundle,
    compressed: &CompressedBundle,
    validation: &[ActivationBatch],
    metric: &dyn Metric,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Empty("validation data"));
    }
    let mut total = 0.0;
    for batch in validation {
        let reference = original.forward(batch, None)?;
        let approx = compressed.forward(batch)?;
        if (reference.rows(), reference.width()) != (approx.rows(), approx.width()) {
            return Err(Error::ShapeMismatch {
                context: "original vs compressed outputs",
                left: (reference.rows(), reference.width()),
                right: (approx.rows(), approx.width()),
            });
        }
        total += metric.batch_score(reference.matrix(), approx.matrix());
    }
    Ok(total / validation.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{allocate_uniform, AllocationConfig, AllocationLabel};
    use alloc::vec;

    fn lcg(m: usize, n: usize, seed: u64) -> Mat<f64> {
        let mut s = seed ^ 0x2545_F491_4F6C_DD1D;
        Mat::from_fn(m, n, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    fn stack(dim: usize, layers: usize, act: Activation) -> ModelBundle {
        let layers = (0..layers)
            .map(|i| {
                let q = WeightMatrix::new("q", lcg(dim, dim, 10 + i as u64)).unwrap();
                let o = WeightMatrix::new("o", lcg(dim, dim, 20 + i as u64)).unwrap();
                Layer::new(vec![q, o], act, false).unwrap()
            })
            .collect();
        ModelBundle::new(layers, ModelMetadata::default()).unwrap()
    }

    fn batches(n: usize, rows: usize, dim: usize) -> Vec<ActivationBatch> {
        (0..n)
            .map(|i| ActivationBatch::new(lcg(rows, dim, 100 + i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn identity_stack_is_identity() {
        let eye = Mat::from_fn(5, 5, |i, j| (i == j) as u8 as f64);
        let layer = Layer::new(
            vec![WeightMatrix::new("w", eye).unwrap()],
            Activation::Identity,
            false,
        )
        .unwrap();
        let model = ModelBundle::new(vec![layer.clone(), layer], ModelMetadata::default()).unwrap();
        let x = ActivationBatch::new(lcg(7, 5, 1)).unwrap();
        let y = model.forward(&x, None).unwrap();
        assert_eq!(y.matrix(), x.matrix());
    }

    #[test]
    fn single_layer_is_matmul() {
        let w = WeightMatrix::new("w", lcg(6, 4, 2)).unwrap();
        let expected = lcg(9, 6, 3) * w.matrix();
        let model = ModelBundle::new(
            vec![Layer::new(vec![w], Activation::Identity, false).unwrap()],
            ModelMetadata::default(),
        )
        .unwrap();
        let y = model
            .forward(&ActivationBatch::new(lcg(9, 6, 3)).unwrap(), None)
            .unwrap();
        assert!(
            frobenius_distance(y.matrix(), expected.as_ref())
                <= 1e-15 * frobenius(expected.as_ref())
        );
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let a = WeightMatrix::new("a", lcg(4, 4, 1)).unwrap();
        let b = WeightMatrix::new("b", lcg(3, 3, 1)).unwrap();
        let err = ModelBundle::new(
            vec![
                Layer::new(vec![a], Activation::Relu, false).unwrap(),
                Layer::new(vec![b], Activation::Relu, false).unwrap(),
            ],
            ModelMetadata::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 1, .. }));

        let model = stack(4, 2, Activation::Relu);
        let err = model
            .forward(&ActivationBatch::new(lcg(2, 5, 1)).unwrap(), None)
            .unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 0, .. }));

        let dup = WeightMatrix::new("a", lcg(4, 4, 2)).unwrap();
        let a = WeightMatrix::new("a", lcg(4, 4, 1)).unwrap();
        assert!(Layer::new(vec![a, dup], Activation::Relu, false).is_err());
    }

    #[test]
    fn hooked_forward_captures_output_norms() {
        let model = stack(8, 2, Activation::Tanh);
        let x = ActivationBatch::new(lcg(20, 8, 5)).unwrap();
        let mut run = CalibrationRun::for_model(&model, "test");
        run.observe(&model, &x).unwrap();
        // Layer 0's first module sees the raw input.
        let y = x.matrix() * model.layers()[0].modules()[0].matrix();
        let spectrum = run.accumulators()[0].decompose(DEFAULT_RANK_TOL).unwrap();
        let direct = frobenius(y.as_ref());
        assert!((spectrum.loss_spectrum()[0] - direct).abs() <= 1e-8 * direct);
        assert_eq!(run.sample_count(), 1);
        assert!(run.layer_importance(1).unwrap() > 0.0);
    }

    #[test]
    fn calibrate_counts_and_errors() {
        let model = stack(6, 2, Activation::Relu);
        let data = batches(4, 10, 6);
        let mut src = data.clone().into_iter().fuse();
        let run = calibrate(&model, &mut src, 3).unwrap();
        assert_eq!(run.sample_count(), 3);
        assert_eq!(run.accumulators()[0].row_count(), 30);

        let mut src = data.clone().into_iter().fuse();
        assert!(matches!(
            calibrate(&model, &mut src, 5),
            Err(Error::DataExhausted { needed: 5, got: 4 })
        ));

        let mut drift = vec![data[0].clone(), ActivationBatch::new(lcg(3, 5, 1)).unwrap()]
            .into_iter()
            .fuse();
        assert!(matches!(
            calibrate(&model, &mut drift, 2),
            Err(Error::Sample { sample: 1, .. })
        ));
    }

    #[test]
    fn merged_halves_equal_full_run() {
        let model = stack(6, 2, Activation::Relu);
        let data = batches(4, 10, 6);
        let full = calibrate(&model, &mut data.clone().into_iter().fuse(), 4).unwrap();
        let mut a = calibrate(&model, &mut data[..2].iter().cloned().fuse(), 2).unwrap();
        let b = calibrate(&model, &mut data[2..].iter().cloned().fuse(), 2).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.sample_count(), 4);
        for (x, y) in a.accumulators().iter().zip(full.accumulators()) {
            let scale = frobenius(y.gram());
            assert!(frobenius_distance(x.gram(), y.gram()) <= 1e-12 * scale);
        }
    }

    #[test]
    fn full_rank_compression_is_lossless_and_cached() {
        let model = stack(8, 3, Activation::Relu);
        let data = batches(6, 16, 8);
        let run = calibrate(&model, &mut data.clone().into_iter().fuse(), 6).unwrap();
        let mut comp = Compressor::new(run);
        let full = RankAllocation {
            ranks: vec![8; 6],
            budget: 48,
            label: AllocationLabel::Uniform,
        };
        let bundle = comp.compress(&model, &full).unwrap();
        assert!(bundle.warnings().is_empty());
        assert!(evaluate(&model, &bundle, &data).unwrap() < 1e-6);
        assert_eq!(bundle.parameter_count(), 6 * 8 * 16);

        let stats = comp.layer_stats().unwrap();
        for ratio in [0.3, 0.6] {
            let alloc = allocate_uniform(&stats, &AllocationConfig::new(ratio)).unwrap();
            let b = comp.compress(&model, &alloc).unwrap();
            assert_eq!(
                b.parameter_count(),
                alloc.ranks.iter().map(|k| k * 16).sum::<usize>()
            );
        }
        assert_eq!(comp.decompositions(), 6);
    }

    #[test]
    fn over_rank_requests_are_capped_with_warning() {
        // Only three output columns are ever nonzero.
        let mut w = lcg(8, 8, 4);
        for j in 3..8 {
            for i in 0..8 {
                w[(i, j)] = 0.0;
            }
        }
        let layer = Layer::new(
            vec![WeightMatrix::new("q", w).unwrap()],
            Activation::Identity,
            false,
        )
        .unwrap();
        let model = ModelBundle::new(vec![layer], ModelMetadata::default()).unwrap();
        let run = calibrate(&model, &mut batches(2, 12, 8).into_iter().fuse(), 2).unwrap();
        let mut comp = Compressor::new(run);
        let alloc = RankAllocation {
            ranks: vec![6],
            budget: 6,
            label: AllocationLabel::Uniform,
        };
        let bundle = comp.compress(&model, &alloc).unwrap();
        assert_eq!(bundle.warnings().len(), 1);
        assert!(bundle.warnings()[0].starts_with("layers.0.q"));
        assert_eq!(bundle.modules().next().unwrap().factors.rank(), 3);
    }

    #[test]
    fn zeroed_bundle_scores_one() {
        let model = stack(5, 2, Activation::Relu);
        let data = batches(3, 12, 5);
        let run = calibrate(&model, &mut data.clone().into_iter().fuse(), 3).unwrap();
        let mut comp = Compressor::new(run);
        let alloc = RankAllocation {
            ranks: vec![2; 4],
            budget: 8,
            label: AllocationLabel::Uniform,
        };
        let bundle = comp.compress(&model, &alloc).unwrap();
        let zeroed_layers = bundle
            .layers()
            .iter()
            .map(|l| CompressedLayer {
                modules: l
                    .modules
                    .iter()
                    .map(|m| CompressedModule {
                        factors: LowRankFactors::new(
                            "z",
                            Mat::zeros(m.factors.rows(), 2),
                            m.factors.b().to_owned(),
                        )
                        .unwrap(),
                        ..m.clone()
                    })
                    .collect(),
                ..l.clone()
            })
            .collect();
        let zeroed = CompressedBundle::from_parts(
            zeroed_layers,
            ModelMetadata::default(),
            alloc,
            Vec::new(),
        )
        .unwrap();
        assert_eq!(evaluate(&model, &zeroed, &data).unwrap(), 1.0);
        assert!(evaluate(&model, &zeroed, &[]).is_err());
        assert_eq!(metric_by_name("mse").unwrap().name(), "mse");
        assert!(metric_by_name("nope").is_none());
    }
}
