//! Seeded synthetic models and activation streams.
//!
//! A spec string such as `synthetic:dim=64,layers=4,batches=256,rows=128,seed=7`
//! describes both a toy layer stack (via `dim`, `layers`, `seed`) and a stream
//! of Gaussian calibration batches (via `dim`, `batches`, `rows`, `seed`).

use lowrank_core::faer::Mat;
use lowrank_core::model::{BatchSource, ModelMetadata};
use lowrank_core::{Activation, ActivationBatch, Layer, ModelBundle, WeightMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const PREFIX: &str = "synthetic:";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub layers: usize,
    pub batches: usize,
    pub rows: usize,
    pub seed: u64,
    /// Input feature `j` has standard deviation `(j+1)^(-decay/2)`.
    pub decay: f64,
    pub activation: Activation,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            batches: 256,
            rows: 128,
            seed: 7,
            decay: 0.5,
            activation: Activation::Relu,
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(
            format!("synthetic.{key}"),
            format!("cannot parse `{value}`"),
        )
    })
}

impl SyntheticSpec {
    pub fn is_synthetic(s: &str) -> bool {
        s.starts_with(PREFIX)
    }

    /// Parses `synthetic:key=value,...`; omitted keys keep their defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let body = s.strip_prefix(PREFIX).ok_or_else(|| {
            Error::config("synthetic", format!("`{s}` does not start with `{PREFIX}`"))
        })?;
        let mut spec = Self::default();
        for part in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::config("synthetic", format!("expected key=value, got `{part}`"))
            })?;
            match key.trim() {
                "dim" => spec.dim = parse_field(key, value)?,
                "layers" => spec.layers = parse_field(key, value)?,
                "batches" => spec.batches = parse_field(key, value)?,
                "rows" => spec.rows = parse_field(key, value)?,
                "seed" => spec.seed = parse_field(key, value)?,
                "decay" => spec.decay = parse_field(key, value)?,
                "act" | "activation" => {
                    spec.activation = Activation::parse(value).ok_or_else(|| {
                        Error::config("synthetic.act", format!("unknown nonlinearity `{value}`"))
                    })?
                }
                other => return Err(Error::config("synthetic", format!("unknown key `{other}`"))),
            }
        }
        for (name, v) in [
            ("dim", spec.dim),
            ("layers", spec.layers),
            ("batches", spec.batches),
            ("rows", spec.rows),
        ] {
            if v == 0 {
                return Err(Error::config(
                    format!("synthetic.{name}"),
                    "must be positive",
                ));
            }
        }
        if !spec.decay.is_finite() || spec.decay < 0.0 {
            return Err(Error::config(
                "synthetic.decay",
                "must be a non-negative number",
            ));
        }
        Ok(spec)
    }

    pub fn describe(&self) -> String {
        format!(
            "{PREFIX}dim={},layers={},batches={},rows={},seed={},decay={},act={}",
            self.dim, self.layers, self.batches, self.rows, self.seed, self.decay, self.activation
        )
    }

    pub fn model(&self) -> Result<ModelBundle> {
        toy_stack(self.dim, self.layers, self.activation, self.seed)
    }

    pub fn source(&self) -> GaussianSource {
        GaussianSource::new(self.clone())
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    gaussian(rng, rows, cols).qr().compute_thin_Q()
}

/// `U·diag(s)·Vᵀ` with Haar-like `U`, `V` and `s_j ∝ (j+1)^(-decay)`,
/// scaled so the matrix has spectral norm `gain`.
fn shaped_weight(rng: &mut ChaCha8Rng, m: usize, n: usize, decay: f64, gain: f64) -> Mat<f64> {
    let r = m.min(n);
    let u = orthonormal(rng, m, r);
    let v = orthonormal(rng, n, r);
    let us = Mat::from_fn(m, r, |i, j| {
        u[(i, j)] * gain * ((j + 1) as f64).powf(-decay)
    });
    &us * v.transpose()
}

/// A residual stack of `layers` blocks, each `dim → 2·dim → dim`
/// (`up`, `down`). Layers differ in gain and spectral decay so that they
/// differ both in importance and in compressibility.
pub fn toy_stack(
    dim: usize,
    layers: usize,
    activation: Activation,
    seed: u64,
) -> Result<ModelBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        let decay = rng.random_range(0.0..1.5);
        let gain = rng.random_range(0.3..1.5);
        let up = shaped_weight(&mut rng, dim, 2 * dim, decay, gain);
        let down = shaped_weight(&mut rng, 2 * dim, dim, decay, gain);
        out.push(Layer::new(
            vec![
                WeightMatrix::new("up", up)?,
                WeightMatrix::new("down", down)?,
            ],
            activation,
            true,
        )?);
    }
    Ok(ModelBundle::new(
        out,
        ModelMetadata {
            name: format!("toy-{dim}x{layers}-seed{seed}"),
            dtype: "f64".into(),
        },
    )?)
}

/// Gaussian batches with per-feature scale `(j+1)^(-decay/2)`. Batch `i`
/// depends only on `(seed, i)`.
#[derive(Debug, Clone)]
pub struct GaussianSource {
    spec: SyntheticSpec,
    next: usize,
}

impl GaussianSource {
    pub fn new(spec: SyntheticSpec) -> Self {
        Self { spec, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.spec.batches
    }

    pub fn is_empty(&self) -> bool {
        self.spec.batches == 0
    }

    pub fn batch(&self, index: usize) -> ActivationBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index as u64 + 1);
        let mut x = gaussian(&mut rng, self.spec.rows, self.spec.dim);
        for j in 0..self.spec.dim {
            let scale = ((j + 1) as f64).powf(-self.spec.decay / 2.0);
            for i in 0..self.spec.rows {
                x[(i, j)] *= scale;
            }
        }
        ActivationBatch::new(x).expect("gaussian batches are finite")
    }

    pub fn all(&self) -> Vec<ActivationBatch> {
        (0..self.len()).map(|i| self.batch(i)).collect()
    }
}

impl BatchSource for GaussianSource {
    fn next_batch(&mut self) -> lowrank_core::Result<Option<ActivationBatch>> {
        if self.next >= self.spec.batches {
            return Ok(None);
        }
        self.next += 1;
        Ok(Some(self.batch(self.next - 1)))
    }

    fn describe(&self) -> String {
        self.spec.describe()
    }
}
