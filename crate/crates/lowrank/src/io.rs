//! Model files, activation dumps and calibration sample selection.

use std::path::Path;

use lowrank_core::model::{BatchSource, ModelMetadata};
use lowrank_core::{Activation, ActivationBatch, Layer, ModelBundle, WeightMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::{GaussianSource, SyntheticSpec};
use crate::tensors::{self, StorageDtype};

pub const MODEL_FORMAT: &str = "lowrank-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub modules: Vec<String>,
    pub activation: String,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    name: String,
    dtype: String,
    layers: Vec<LayerHeader>,
}

pub fn layer_headers(model: &ModelBundle) -> Vec<LayerHeader> {
    model
        .layers()
        .iter()
        .map(|l| LayerHeader {
            modules: l.modules().iter().map(|m| m.name().to_string()).collect(),
            activation: l.activation().to_string(),
            residual: l.residual(),
        })
        .collect()
}

pub fn parse_activation(s: &str, path: &Path) -> Result<Activation> {
    Activation::parse(s).ok_or_else(|| Error::format(path, format!("unknown nonlinearity `{s}`")))
}

/// Writes weights as `layers.{i}.{module}` with the layer structure in the
/// header metadata.
pub fn save_model(model: &ModelBundle, path: &Path, dtype: StorageDtype) -> Result<()> {
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        name: model.metadata().name.clone(),
        dtype: dtype.to_string(),
        layers: layer_headers(model),
    };
    let meta = serde_json::to_string(&header).expect("header serializes");
    let bytes = tensors::encode(
        model.matrices().map(|(id, w)| (id.to_string(), w.matrix())),
        dtype,
        Some(meta),
    )?;
    tensors::write_bytes(path, &bytes)
}

pub fn read_model(path: &Path) -> Result<ModelBundle> {
    let mut file = tensors::read_file(path)?;
    let meta = file
        .metadata
        .take()
        .ok_or_else(|| Error::format(path, "no layer metadata in header"))?;
    let header: ModelHeader = serde_json::from_str(&meta)
        .map_err(|e| Error::format(path, format!("layer metadata: {e}")))?;
    if header.format != MODEL_FORMAT {
        return Err(Error::format(
            path,
            format!("unsupported model format `{}`", header.format),
        ));
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, lh) in header.layers.iter().enumerate() {
        let modules = lh
            .modules
            .iter()
            .map(|m| {
                let w = file.take(&format!("layers.{i}.{m}"), path)?;
                Ok(WeightMatrix::new(m.clone(), w)?)
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(Layer::new(
            modules,
            parse_activation(&lh.activation, path)?,
            lh.residual,
        )?);
    }
    if let Some(extra) = file.tensors.keys().next() {
        return Err(Error::format(
            path,
            format!("tensor `{extra}` is not part of any layer"),
        ));
    }
    Ok(ModelBundle::new(
        layers,
        ModelMetadata {
            name: header.name,
            dtype: header.dtype,
        },
    )?)
}

/// A model file path or a `synthetic:` spec.
pub fn load_model(arg: &str) -> Result<ModelBundle> {
    if SyntheticSpec::is_synthetic(arg) {
        SyntheticSpec::parse(arg)?.model()
    } else {
        read_model(Path::new(arg))
    }
}

/// Writes batches as `batch.{i}`.
pub fn save_batches(batches: &[ActivationBatch], path: &Path) -> Result<()> {
    let bytes = tensors::encode(
        batches
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("batch.{i}"), b.matrix())),
        StorageDtype::F64,
        None,
    )?;
    tensors::write_bytes(path, &bytes)
}

pub fn read_batches(path: &Path) -> Result<Vec<ActivationBatch>> {
    let file = tensors::read_file(path)?;
    let mut indexed = file
        .tensors
        .into_iter()
        .map(|(name, m)| {
            let idx = name
                .strip_prefix("batch.")
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| {
                    Error::format(path, format!("tensor `{name}` is not named batch.<index>"))
                })?;
            Ok((idx, ActivationBatch::new(m)?))
        })
        .collect::<Result<Vec<_>>>()?;
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, b)| b).collect())
}

/// Calibration or validation data: a dump file or a synthetic stream.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(GaussianSource),
    Dump {
        path: String,
        batches: Vec<ActivationBatch>,
    },
}

impl DataSource {
    pub fn open(arg: &str) -> Result<Self> {
        if SyntheticSpec::is_synthetic(arg) {
            Ok(DataSource::Synthetic(SyntheticSpec::parse(arg)?.source()))
        } else {
            Ok(DataSource::Dump {
                path: arg.to_string(),
                batches: read_batches(Path::new(arg))?,
            })
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.len(),
            DataSource::Dump { batches, .. } => batches.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, index: usize) -> ActivationBatch {
        match self {
            DataSource::Synthetic(s) => s.batch(index),
            DataSource::Dump { batches, .. } => batches[index].clone(),
        }
    }

    pub fn all(&self) -> Vec<ActivationBatch> {
        (0..self.len()).map(|i| self.batch(i)).collect()
    }

    pub fn describe(&self) -> String {
        match self {
            DataSource::Synthetic(s) => s.describe(),
            DataSource::Dump { path, .. } => path.clone(),
        }
    }

    /// Picks `samples` batch indices with `seed`, in ascending order. Asking
    /// for more than are available selects all of them, so calibration then
    /// reports the shortfall.
    pub fn select(self, samples: usize, seed: u64) -> Selected {
        let available = self.len();
        let indices = if samples >= available {
            (0..available).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, available, samples).into_vec();
            picked.sort_unstable();
            picked
        };
        Selected {
            source: self,
            indices,
            next: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Selected {
    source: DataSource,
    indices: Vec<usize>,
    next: usize,
    seed: u64,
}

impl Selected {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Splits the remaining selection into `parts` contiguous pieces.
    pub fn split(&self, parts: usize) -> Vec<Selected> {
        let rest = &self.indices[self.next..];
        let parts = parts.clamp(1, rest.len().max(1));
        let size = rest.len().div_ceil(parts);
        rest.chunks(size.max(1))
            .map(|chunk| Selected {
                source: self.source.clone(),
                indices: chunk.to_vec(),
                next: 0,
                seed: self.seed,
            })
            .collect()
    }
}

impl BatchSource for Selected {
    fn next_batch(&mut self) -> lowrank_core::Result<Option<ActivationBatch>> {
        let Some(&i) = self.indices.get(self.next) else {
            return Ok(None);
        };
        self.next += 1;
        Ok(Some(self.source.batch(i)))
    }

    fn describe(&self) -> String {
        format!("{} (selection seed {})", self.source.describe(), self.seed)
    }
}
