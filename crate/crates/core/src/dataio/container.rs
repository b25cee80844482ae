//! Raw little-endian array files described by JSON manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Location and layout of one array file, relative to the container root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

impl ArraySpec {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.num_elements() * self.dtype.size()
    }
}

/// Typed array payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U32(_) => Dtype::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => ArrayData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::F64 => ArrayData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::U32 => ArrayData::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }

    pub fn into_f32(self) -> Option<Vec<f32>> {
        match self {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_f64(self) -> Option<Vec<f64>> {
        match self {
            ArrayData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_u32(self) -> Option<Vec<u32>> {
        match self {
            ArrayData::U32(v) => Some(v),
            _ => None,
        }
    }
}

/// Writes `data` under `root/rel` and returns its spec.
pub fn write_array(root: &Path, rel: &str, shape: &[usize], data: &ArrayData) -> Result<ArraySpec> {
    let spec = ArraySpec { path: rel.to_string(), shape: shape.to_vec(), dtype: data.dtype() };
    assert_eq!(spec.num_elements(), data.len(), "array `{rel}` shape does not match its data");
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, data.to_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(spec)
}

/// Reads an array, checking the file length against its `ArraySpec`. `owner`
/// names the episode or checkpoint for error messages.
pub fn read_array(root: &Path, spec: &ArraySpec, owner: &str) -> Result<ArrayData> {
    let path: PathBuf = root.join(&spec.path);
    let err = |reason: String| Error::Array { episode: owner.to_string(), path: path.clone(), reason };
    let bytes = fs::read(&path).map_err(|e| err(format!("cannot read: {e}")))?;
    if bytes.len() != spec.byte_len() {
        return Err(err(format!(
            "expected {} bytes for shape {:?} {:?}, found {}",
            spec.byte_len(),
            spec.shape,
            spec.dtype,
            bytes.len()
        )));
    }
    Ok(ArrayData::from_bytes(spec.dtype, &bytes))
}

/// Serializes `value` as pretty JSON with sorted object keys.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let v = serde_json::to_value(value).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    let text = serde_json::to_string_pretty(&v).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}
