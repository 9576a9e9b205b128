//! Checkpoints: a raw little-endian `f32` blob plus a JSON index next to it
//! (`<path>.json`) naming every tensor, its role, shape and offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, IoContext, Result};

const FORMAT: &str = "doalab-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<IndexEntry>,
    pub adam: Option<AdamState>,
    /// Free-form metadata (model config, epoch, metrics).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
}

pub struct Checkpoint {
    pub store: ParamStore<f32>,
    pub adam: Option<Adam<f32>>,
    pub meta: serde_json::Value,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    adam: Option<&Adam<T>>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    let mut put = |name: &str, role: TensorRole, t: &Tensor<T>| {
        tensors.push(IndexEntry { name: name.to_string(), role, shape: t.shape().to_vec(), offset });
        offset += t.numel();
        for v in t.data() {
            blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    };
    for (k, t) in store.params() {
        put(k, TensorRole::Param, t);
    }
    for (k, t) in store.buffers() {
        put(k, TensorRole::Buffer, t);
    }
    if let Some(a) = adam {
        for (k, t) in &a.m {
            put(k, TensorRole::AdamM, t);
        }
        for (k, t) in &a.v {
            put(k, TensorRole::AdamV, t);
        }
    }
    let index = CheckpointIndex {
        format: FORMAT.into(),
        version: VERSION,
        tensors,
        adam: adam.map(|a| AdamState { cfg: a.cfg, step: a.step }),
        meta,
    };
    fs::write(path, &blob).at(path)?;
    let ip = index_path(path);
    fs::write(&ip, serde_json::to_vec_pretty(&index)?).at(&ip)?;
    Ok(())
}

pub fn read_checkpoint_index(path: &Path) -> Result<CheckpointIndex> {
    let ip = index_path(path);
    let index: CheckpointIndex = serde_json::from_slice(&fs::read(&ip).at(&ip)?)?;
    if index.format != FORMAT || index.version != VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint format {} v{}",
            ip.display(),
            index.format,
            index.version
        )));
    }
    Ok(index)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let index = read_checkpoint_index(path)?;
    let blob = fs::read(path).at(path)?;
    if blob.len() % 4 != 0 {
        return Err(Error::Validation(format!("{}: truncated checkpoint", path.display())));
    }
    let values: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mut store = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in &index.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(n).filter(|&end| end <= values.len()).ok_or_else(|| {
            Error::Validation(format!("{}: tensor {} runs past the end of the data", path.display(), e.name))
        })?;
        let t = Tensor::new(&e.shape, values[e.offset..end].to_vec())?;
        match e.role {
            TensorRole::Param => store.insert(e.name.clone(), t),
            TensorRole::Buffer => store.insert_buffer(e.name.clone(), t),
            TensorRole::AdamM => {
                m.insert(e.name.clone(), t);
            }
            TensorRole::AdamV => {
                v.insert(e.name.clone(), t);
            }
        }
    }
    let adam = index.adam.map(|s| Adam { cfg: s.cfg, step: s.step, m, v });
    Ok(Checkpoint { store, adam, meta: index.meta })
}
