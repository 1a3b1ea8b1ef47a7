//! Calibration artifacts: accumulators in a tensor container plus a JSON
//! sidecar, and an optional spectrum cache next to them.
//!
//! For `stats.safetensors` the sidecar is `stats.json` and the cache is
//! `stats.spectra.safetensors`.

use std::path::{Path, PathBuf};

use lowrank_core::allocation::{CosineStats, MatrixId};
use lowrank_core::model::{calibrate_into, CalibrationRun};
use lowrank_core::{Compressor, CovarianceAccumulator, ModelBundle, Spectrum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Selected;
use crate::tensors::{self, StorageDtype};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub name: String,
    pub layer: usize,
    pub module: String,
    pub shape: [usize; 2],
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineEntry {
    pub similarity_sum: f64,
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    /// Model path or synthetic spec the run was collected on.
    pub model: String,
    pub source: String,
    pub samples: usize,
    pub seed: u64,
    pub block_rows: usize,
    pub tensor_file: String,
    pub checksum: String,
    pub matrices: Vec<MatrixEntry>,
    pub layers: Vec<CosineEntry>,
}

#[derive(Debug, Clone)]
pub struct CalibrationArtifact {
    pub run: CalibrationRun,
    pub sidecar: Sidecar,
    pub path: PathBuf,
}

pub fn sidecar_path(stats: &Path) -> PathBuf {
    stats.with_extension("json")
}

pub fn spectra_path(stats: &Path) -> PathBuf {
    stats.with_extension("spectra.safetensors")
}

fn gram_name(id: &MatrixId) -> String {
    format!("{id}.gram")
}

/// Calibrates on `samples` selected batches, splitting the work across up
/// to `threads` workers whose partial runs are merged in selection order.
pub fn run_calibration(
    model: &ModelBundle,
    selected: Selected,
    samples: usize,
    threads: usize,
    block_rows: usize,
) -> Result<CalibrationRun> {
    let source = lowrank_core::model::BatchSource::describe(&selected);
    let available = selected.indices().len();
    if available < samples {
        return Err(lowrank_core::Error::DataExhausted {
            needed: samples,
            got: available,
        }
        .into());
    }
    let parts = selected.split(threads.max(1));
    let partials: Vec<lowrank_core::Result<CalibrationRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .into_iter()
            .map(|mut part| {
                scope.spawn(move || {
                    let n = part.indices().len();
                    calibrate_blocked(model, &mut part, n, block_rows)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("calibration worker panicked"))
            .collect()
    });
    let mut iter = partials.into_iter();
    let mut run = iter.next().expect("at least one part")?;
    for partial in iter {
        run.merge(&partial?)?;
    }
    run.set_source(source);
    Ok(run)
}

fn calibrate_blocked(
    model: &ModelBundle,
    source: &mut Selected,
    samples: usize,
    block_rows: usize,
) -> lowrank_core::Result<CalibrationRun> {
    let run = CalibrationRun::for_model(model, "").with_block_rows(block_rows);
    calibrate_into(run, model, source, samples)
}

/// Writes the accumulators and sidecar; returns the sidecar.
pub fn save(
    run: &CalibrationRun,
    model: &str,
    seed: u64,
    block_rows: usize,
    path: &Path,
) -> Result<Sidecar> {
    let bytes = tensors::encode(
        run.ids()
            .iter()
            .zip(run.accumulators())
            .map(|(id, acc)| (gram_name(id), acc.gram())),
        StorageDtype::F64,
        None,
    )?;
    tensors::write_bytes(path, &bytes)?;
    let sidecar = Sidecar {
        schema_version: SCHEMA_VERSION,
        model: model.to_string(),
        source: run.source().to_string(),
        samples: run.sample_count(),
        seed,
        block_rows,
        tensor_file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        checksum: tensors::checksum(&bytes),
        matrices: run
            .ids()
            .iter()
            .zip(run.shapes())
            .zip(run.accumulators())
            .map(|((id, s), acc)| MatrixEntry {
                name: id.to_string(),
                layer: id.layer,
                module: id.module.clone(),
                shape: [s.0, s.1],
                rows: acc.row_count(),
            })
            .collect(),
        layers: run
            .cosine_stats()
            .iter()
            .map(|c| CosineEntry {
                similarity_sum: c.similarity_sum,
                rows: c.rows,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    tensors::write_bytes(&sidecar_path(path), json.as_bytes())?;
    Ok(sidecar)
}

pub fn load(path: &Path) -> Result<CalibrationArtifact> {
    let side_path = sidecar_path(path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(&side_path, e.to_string()))?;
    if sidecar.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            &side_path,
            format!("schema version {} is not supported", sidecar.schema_version),
        ));
    }
    let bytes = tensors::read_bytes(path)?;
    let actual = tensors::checksum(&bytes);
    if actual != sidecar.checksum {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: sidecar.checksum.clone(),
            actual,
        });
    }
    let mut file = tensors::decode(&bytes, path)?;
    let mut ids = Vec::new();
    let mut shapes = Vec::new();
    let mut accs = Vec::new();
    for m in &sidecar.matrices {
        let id = MatrixId::new(m.layer, m.module.clone());
        let gram = file.take(&gram_name(&id), path)?;
        if gram.nrows() != m.shape[1] {
            return Err(Error::format(
                path,
                format!(
                    "{}: Gram is {}x{}, manifest shape {:?}",
                    m.name,
                    gram.nrows(),
                    gram.ncols(),
                    m.shape
                ),
            ));
        }
        accs.push(
            CovarianceAccumulator::from_parts(gram, m.rows)?.with_block_rows(sidecar.block_rows),
        );
        ids.push(id);
        shapes.push((m.shape[0], m.shape[1]));
    }
    let cosine = sidecar
        .layers
        .iter()
        .map(|c| CosineStats {
            similarity_sum: c.similarity_sum,
            rows: c.rows,
        })
        .collect();
    let run = CalibrationRun::from_parts(
        ids,
        shapes,
        accs,
        cosine,
        sidecar.samples,
        sidecar.source.clone(),
    )?;
    Ok(CalibrationArtifact {
        run,
        sidecar,
        path: path.to_path_buf(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    stats_checksum: String,
    rank_tol: f64,
}

/// Spectra stored for this artifact at this tolerance, if any.
pub fn load_spectra(
    artifact: &CalibrationArtifact,
    rank_tol: f64,
) -> Result<Option<Vec<Spectrum>>> {
    let path = spectra_path(&artifact.path);
    if !path.exists() {
        return Ok(None);
    }
    let mut file = tensors::read_file(&path)?;
    let header: Option<CacheHeader> = file
        .metadata
        .as_deref()
        .and_then(|m| serde_json::from_str(m).ok());
    match header {
        Some(h) if h.stats_checksum == artifact.sidecar.checksum && h.rank_tol == rank_tol => {}
        _ => return Ok(None),
    }
    artifact
        .run
        .ids()
        .iter()
        .map(|id| {
            let sigma = file.take(&format!("{id}.sigma"), &path)?;
            let vectors = file.take(&format!("{id}.V"), &path)?;
            let values = (0..sigma.ncols()).map(|j| sigma[(0, j)]).collect();
            Ok(Spectrum::from_parts(values, vectors)?)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn save_spectra(
    artifact: &CalibrationArtifact,
    rank_tol: f64,
    spectra: &[&Spectrum],
) -> Result<()> {
    let sigmas: Vec<_> = spectra
        .iter()
        .map(|s| {
            let v = s.singular_values();
            lowrank_core::faer::Mat::from_fn(1, v.len(), |_, j| v[j])
        })
        .collect();
    let mut entries = Vec::new();
    for ((id, s), sigma) in artifact.run.ids().iter().zip(spectra).zip(&sigmas) {
        entries.push((format!("{id}.sigma"), sigma.as_ref()));
        entries.push((format!("{id}.V"), s.right_vectors()));
    }
    let header = CacheHeader {
        stats_checksum: artifact.sidecar.checksum.clone(),
        rank_tol,
    };
    let bytes = tensors::encode(
        entries,
        StorageDtype::F64,
        Some(serde_json::to_string(&header).expect("header")),
    )?;
    tensors::write_bytes(&spectra_path(&artifact.path), &bytes)
}

/// A compressor seeded from the on-disk spectrum cache when it matches.
pub fn compressor(artifact: &CalibrationArtifact, rank_tol: f64) -> Result<Compressor> {
    match load_spectra(artifact, rank_tol)? {
        Some(spectra) => Ok(Compressor::with_spectra(
            artifact.run.clone(),
            rank_tol,
            spectra,
        )?),
        None => Ok(Compressor::with_rank_tol(artifact.run.clone(), rank_tol)),
    }
}

/// Decomposes anything not yet cached and refreshes the cache file when new
/// decompositions happened.
pub fn persist_spectra(artifact: &CalibrationArtifact, comp: &mut Compressor) -> Result<()> {
    comp.spectra()?;
    if comp.decompositions() > 0 || !spectra_path(&artifact.path).exists() {
        let rank_tol = comp.rank_tol();
        save_spectra(artifact, rank_tol, &comp.spectra()?)?;
    }
    Ok(())
}
