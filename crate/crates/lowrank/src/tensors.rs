//! Reading and writing 2-D `f64`/`f32` tensors in the safetensors format.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use lowrank_core::dense::{from_row_major, to_row_major};
use lowrank_core::faer::{Mat, MatRef};
use safetensors::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The single `__metadata__` key; safetensors keeps metadata in a hash map,
/// so one key is the only way to get a stable header.
pub const METADATA_KEY: &str = "lowrank";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    F32,
    #[default]
    F64,
}

impl StorageDtype {
    pub fn size(&self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "fp32" | "float32" => Some(StorageDtype::F32),
            "f64" | "fp64" | "float64" => Some(StorageDtype::F64),
            _ => None,
        }
    }

    fn safetensors(&self) -> Dtype {
        match self {
            StorageDtype::F32 => Dtype::F32,
            StorageDtype::F64 => Dtype::F64,
        }
    }
}

impl fmt::Display for StorageDtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StorageDtype::F32 => "f32",
            StorageDtype::F64 => "f64",
        })
    }
}

struct Owned {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Owned {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn encode_matrix(m: MatRef<'_, f64>, dtype: StorageDtype) -> Owned {
    let values = to_row_major(m);
    let bytes = match dtype {
        StorageDtype::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        StorageDtype::F32 => values
            .iter()
            .flat_map(|v| (*v as f32).to_le_bytes())
            .collect(),
    };
    Owned {
        dtype: dtype.safetensors(),
        shape: vec![m.nrows(), m.ncols()],
        bytes,
    }
}

/// Serializes `tensors` (row-major, little-endian) with an optional JSON
/// metadata string.
pub fn encode<'a>(
    tensors: impl IntoIterator<Item = (String, MatRef<'a, f64>)>,
    dtype: StorageDtype,
    metadata: Option<String>,
) -> Result<Vec<u8>> {
    let owned: Vec<(String, Owned)> = tensors
        .into_iter()
        .map(|(name, m)| (name, encode_matrix(m, dtype)))
        .collect();
    let info = metadata.map(|m| HashMap::from([(METADATA_KEY.to_string(), m)]));
    safetensors::serialize(owned.iter().map(|(n, o)| (n.as_str(), o)), info)
        .map_err(|e| Error::format("<tensor buffer>", e.to_string()))
}

#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Mat<f64>>,
    pub dtypes: BTreeMap<String, StorageDtype>,
    pub metadata: Option<String>,
}

impl TensorFile {
    pub fn get(&self, name: &str, path: &Path) -> Result<&Mat<f64>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor {
            path: path.to_path_buf(),
            name: name.to_string(),
        })
    }

    pub fn take(&mut self, name: &str, path: &Path) -> Result<Mat<f64>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor {
                path: path.to_path_buf(),
                name: name.to_string(),
            })
    }
}

/// Parses a safetensors buffer; `path` only labels errors. One-dimensional
/// tensors load as a single row.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = TensorFile {
        metadata: header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY).cloned()),
        ..TensorFile::default()
    };
    for (name, view) in st.iter() {
        let (rows, cols) = match *view.shape() {
            [n] => (1, n),
            [r, c] => (r, c),
            ref other => {
                return Err(Error::format(
                    path,
                    format!("tensor `{name}` has shape {other:?}; expected 2-D"),
                ))
            }
        };
        let data = view.data();
        let (values, dtype): (Vec<f64>, _) = match view.dtype() {
            Dtype::F64 => (
                data.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
                StorageDtype::F64,
            ),
            Dtype::F32 => (
                data.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                    .collect(),
                StorageDtype::F32,
            ),
            other => {
                return Err(Error::format(
                    path,
                    format!("tensor `{name}` has unsupported dtype {other}"),
                ))
            }
        };
        out.tensors
            .insert(name.to_string(), from_row_major(rows, cols, &values));
        out.dtypes.insert(name.to_string(), dtype);
    }
    Ok(out)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<TensorFile> {
    decode(&read_bytes(path)?, path)
}

/// `sha256:<hex>` of a byte buffer.
pub fn checksum(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}
