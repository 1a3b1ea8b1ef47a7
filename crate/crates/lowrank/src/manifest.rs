//! Export and import of compressed bundles: factors in
//! `factors.safetensors` as `layers.{i}.{module}.A` / `.B`, described by
//! `manifest.json`.

use std::path::Path;

use lowrank_core::allocation::{AllocationLabel, MatrixId, RankAllocation};
use lowrank_core::model::{CompressedLayer, CompressedModule, ModelMetadata};
use lowrank_core::{CompressedBundle, LowRankFactors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{parse_activation, LayerHeader};
use crate::tensors::{self, StorageDtype};

pub const SCHEMA_VERSION: u32 = 1;
pub const FACTORS_FILE: &str = "factors.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

/// How the allocation was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `uniform` or `dynamic`.
    pub strategy: String,
    /// Selected `α`; absent for the uniform allocation.
    pub alpha: Option<f64>,
    pub delta: f64,
    pub ratio: f64,
    pub seed: u64,
    pub budget: usize,
    pub stats_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestModel {
    pub name: String,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMatrix {
    pub name: String,
    pub layer: usize,
    pub module: String,
    pub shape: [usize; 2],
    pub rank: usize,
    pub requested_rank: usize,
    /// Optimal truncation loss on the calibration data.
    pub loss: f64,
    pub dtype: StorageDtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model: ManifestModel,
    pub tensor_file: String,
    pub layers: Vec<LayerHeader>,
    pub matrices: Vec<ManifestMatrix>,
    pub allocation: Provenance,
    /// `Σ k_i (m_i + n_i)`.
    pub parameter_count: usize,
    pub original_parameter_count: usize,
    pub parameter_bytes: usize,
    pub warnings: Vec<String>,
    pub checksum: String,
}

impl Manifest {
    pub fn label(&self) -> AllocationLabel {
        self.allocation
            .alpha
            .map_or(AllocationLabel::Uniform, AllocationLabel::Alpha)
    }
}

/// Writes the bundle into `dir` and returns its manifest.
pub fn export(
    bundle: &CompressedBundle,
    provenance: Provenance,
    dtype: StorageDtype,
    dir: &Path,
) -> Result<Manifest> {
    let mut entries = Vec::new();
    for m in bundle.modules() {
        entries.push((format!("{}.A", m.id), m.factors.a()));
        entries.push((format!("{}.B", m.id), m.factors.b()));
    }
    let bytes = tensors::encode(entries, dtype, None)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        model: ManifestModel {
            name: bundle.metadata().name.clone(),
            dtype: bundle.metadata().dtype.clone(),
        },
        tensor_file: FACTORS_FILE.into(),
        layers: bundle
            .layers()
            .iter()
            .map(|l| LayerHeader {
                modules: l.modules.iter().map(|m| m.id.module.clone()).collect(),
                activation: l.activation.to_string(),
                residual: l.residual,
            })
            .collect(),
        matrices: bundle
            .modules()
            .map(|m| ManifestMatrix {
                name: m.id.to_string(),
                layer: m.id.layer,
                module: m.id.module.clone(),
                shape: [m.original_shape.0, m.original_shape.1],
                rank: m.factors.rank(),
                requested_rank: m.requested_rank,
                loss: m.loss,
                dtype,
            })
            .collect(),
        allocation: provenance,
        parameter_count: bundle.parameter_count(),
        original_parameter_count: bundle.original_parameter_count(),
        parameter_bytes: bundle.parameter_count() * dtype.size(),
        warnings: bundle.warnings().to_vec(),
        checksum: tensors::checksum(&bytes),
    };
    tensors::write_bytes(&dir.join(FACTORS_FILE), &bytes)?;
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    tensors::write_bytes(&dir.join(MANIFEST_FILE), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "schema version {} is not supported",
                manifest.schema_version
            ),
        ));
    }
    Ok(manifest)
}

/// Reads and validates a bundle written by [`export`].
pub fn import(dir: &Path) -> Result<(CompressedBundle, Manifest)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(&manifest.tensor_file);
    let bytes = tensors::read_bytes(&path)?;
    let actual = tensors::checksum(&bytes);
    if actual != manifest.checksum {
        return Err(Error::Checksum {
            path,
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    let mut file = tensors::decode(&bytes, &path)?;
    let mut layers: Vec<CompressedLayer> = manifest
        .layers
        .iter()
        .map(|l| {
            Ok(CompressedLayer {
                modules: Vec::with_capacity(l.modules.len()),
                activation: parse_activation(&l.activation, &path)?,
                residual: l.residual,
            })
        })
        .collect::<Result<_>>()?;
    for m in &manifest.matrices {
        let a = file.take(&format!("{}.A", m.name), &path)?;
        let b = file.take(&format!("{}.B", m.name), &path)?;
        let [rows, cols] = m.shape;
        if a.nrows() != rows || a.ncols() != m.rank || b.nrows() != m.rank || b.ncols() != cols {
            return Err(Error::format(
                &path,
                format!(
                    "{}: manifest says {rows}x{cols} at rank {}, tensors are A {}x{} and B {}x{}",
                    m.name,
                    m.rank,
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols()
                ),
            ));
        }
        let layer = layers.get_mut(m.layer).ok_or_else(|| {
            Error::format(
                &path,
                format!("{}: layer {} is not declared", m.name, m.layer),
            )
        })?;
        layer.modules.push(CompressedModule {
            id: MatrixId::new(m.layer, m.module.clone()),
            original_shape: (rows, cols),
            requested_rank: m.requested_rank,
            loss: m.loss,
            factors: LowRankFactors::new(m.module.clone(), a, b)?,
        });
    }
    for (i, (l, h)) in layers.iter().zip(&manifest.layers).enumerate() {
        let names: Vec<&str> = l.modules.iter().map(|m| m.id.module.as_str()).collect();
        if names != h.modules.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::format(
                &path,
                format!("layer {i}: matrices do not match the declared modules"),
            ));
        }
    }
    let allocation = RankAllocation {
        ranks: manifest.matrices.iter().map(|m| m.requested_rank).collect(),
        budget: manifest.allocation.budget,
        label: manifest.label(),
    };
    let bundle = CompressedBundle::from_parts(
        layers,
        ModelMetadata {
            name: manifest.model.name.clone(),
            dtype: manifest.model.dtype.clone(),
        },
        allocation,
        manifest.warnings.clone(),
    )
    .map_err(|e| Error::format(&path, e.to_string()))?;
    if bundle.parameter_count() != manifest.parameter_count {
        return Err(Error::format(
            &path,
            format!(
                "parameter count {} does not match manifest {}",
                bundle.parameter_count(),
                manifest.parameter_count
            ),
        ));
    }
    Ok((bundle, manifest))
}
