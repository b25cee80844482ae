//! Synthetic episodes standing in for video/text/object backbone features,
//! and the on-disk dataset container.
//!
//! A dataset directory holds `manifest.json` (sorted keys) plus one raw
//! little-endian, row-major file per array under `arrays/<episode_id>/`.

pub mod container;
mod generator;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use container::{ArrayData, ArraySpec, Dtype};
pub use generator::{episode_seed, generate_episode, generate_split, GeneratorConfig, SignalMode, World};

use crate::error::{Error, Result};
use crate::geometry::Interval;
use crate::nn::Tensor;
use crate::objects::Detection;

pub const DATASET_VERSION: u32 = 1;

/// Row-major `f32` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix32 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.rows, self.cols, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Narration {
    pub time: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub fps: f64,
    pub window_frames: u32,
    pub signal_mode: SignalMode,
}

impl EpisodeMeta {
    pub fn seconds_per_clip(&self) -> f64 {
        crate::geometry::seconds_per_clip(self.window_frames, self.fps)
    }
}

/// One video/query training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: String,
    /// `[T x D_v]`
    pub clip_features: Matrix32,
    /// `[L x D_T]`
    pub query_tokens: Matrix32,
    /// `[P x D_o]` embeddings of the query's nouns.
    pub noun_embeddings: Matrix32,
    pub detections: Vec<Detection>,
    pub gt: Interval,
    pub narrations: Vec<Narration>,
    pub meta: EpisodeMeta,
}

impl EpisodeRecord {
    pub fn num_clips(&self) -> usize {
        self.clip_features.rows
    }

    /// Checks the record's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.num_clips() as f64;
        let bad = |why: &str| Err(Error::Data(format!("episode `{}`: {why}", self.episode_id)));
        if self.clip_features.rows == 0 || self.query_tokens.rows == 0 {
            return bad("needs at least one clip and one query token");
        }
        if self.gt.start < 0.0 || self.gt.end > t || self.gt.start > self.gt.end {
            return bad("ground truth outside [0, T]");
        }
        if self.narrations.windows(2).any(|w| w[0].time >= w[1].time) {
            return bad("narration times not strictly increasing");
        }
        if self.narrations.iter().any(|n| n.time < 0.0 || n.time > t) {
            return bad("narration outside [0, T]");
        }
        if self.detections.iter().any(|d| d.clip_index >= self.num_clips()) {
            return bad("detection clip index out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub episode_id: String,
    pub arrays: std::collections::BTreeMap<String, ArraySpec>,
    pub gt: Interval,
    pub narrations: Vec<Narration>,
    pub meta: EpisodeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generator_config_hash: String,
    pub episodes: Vec<EpisodeEntry>,
}

/// Hex SHA-256 of a value's canonical (sorted-key) JSON.
pub fn stable_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    let digest = Sha256::digest(serde_json::to_string(&v).expect("json").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn episode_arrays(ep: &EpisodeRecord) -> Vec<(&'static str, Vec<usize>, ArrayData)> {
    let d_o = ep.noun_embeddings.cols;
    let n = ep.detections.len();
    vec![
        ("clip_features", vec![ep.clip_features.rows, ep.clip_features.cols], ArrayData::F32(ep.clip_features.data.clone())),
        ("query_tokens", vec![ep.query_tokens.rows, ep.query_tokens.cols], ArrayData::F32(ep.query_tokens.data.clone())),
        ("noun_embeddings", vec![ep.noun_embeddings.rows, d_o], ArrayData::F32(ep.noun_embeddings.data.clone())),
        ("det_clip", vec![n], ArrayData::U32(ep.detections.iter().map(|d| d.clip_index as u32).collect())),
        ("det_category", vec![n], ArrayData::U32(ep.detections.iter().map(|d| d.category_id).collect())),
        ("det_confidence", vec![n], ArrayData::F32(ep.detections.iter().map(|d| d.confidence).collect())),
        ("det_embedding", vec![n, d_o], ArrayData::F32(ep.detections.iter().flat_map(|d| d.embedding.iter().copied()).collect())),
    ]
}

/// Writes records under `root` and returns the manifest that was saved.
pub fn write_dataset(records: &[EpisodeRecord], root: &Path, generator_config_hash: &str) -> Result<DatasetManifest> {
    let mut episodes = Vec::with_capacity(records.len());
    for ep in records {
        ep.validate()?;
        let mut arrays = std::collections::BTreeMap::new();
        for (name, shape, data) in episode_arrays(ep) {
            let rel = format!("arrays/{}/{name}.{}", ep.episode_id, ext(data.dtype()));
            arrays.insert(name.to_string(), container::write_array(root, &rel, &shape, &data)?);
        }
        episodes.push(EpisodeEntry {
            episode_id: ep.episode_id.clone(),
            arrays,
            gt: ep.gt,
            narrations: ep.narrations.clone(),
            meta: ep.meta.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        generator_config_hash: generator_config_hash.to_string(),
        episodes,
    };
    container::write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn ext(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
        Dtype::U32 => "u32",
    }
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::Data(format!("no manifest.json in {}", root.display())));
    }
    let manifest: DatasetManifest = container::read_json(&path)?;
    if manifest.version > DATASET_VERSION {
        return Err(Error::Version { found: manifest.version, supported: DATASET_VERSION });
    }
    Ok(manifest)
}

/// Loads every episode listed in `root/manifest.json`.
pub fn read_dataset(root: &Path) -> Result<Vec<EpisodeRecord>> {
    let manifest = read_manifest(root)?;
    manifest.episodes.iter().map(|entry| read_entry(root, entry)).collect()
}

fn read_entry(root: &Path, entry: &EpisodeEntry) -> Result<EpisodeRecord> {
    let id = entry.episode_id.as_str();
    let get = |name: &str| -> Result<(ArraySpec, ArrayData)> {
        let spec = entry
            .arrays
            .get(name)
            .ok_or_else(|| Error::Data(format!("episode `{id}`: manifest lacks array `{name}`")))?;
        Ok((spec.clone(), container::read_array(root, spec, id)?))
    };
    let wrong = |name: &str| Error::Data(format!("episode `{id}`: array `{name}` has the wrong dtype or rank"));
    let matrix = |name: &str| -> Result<Matrix32> {
        let (spec, data) = get(name)?;
        if spec.shape.len() != 2 {
            return Err(wrong(name));
        }
        Ok(Matrix32::new(spec.shape[0], spec.shape[1], data.into_f32().ok_or_else(|| wrong(name))?))
    };
    let clip_features = matrix("clip_features")?;
    let query_tokens = matrix("query_tokens")?;
    let noun_embeddings = matrix("noun_embeddings")?;
    let clips = get("det_clip")?.1.into_u32().ok_or_else(|| wrong("det_clip"))?;
    let cats = get("det_category")?.1.into_u32().ok_or_else(|| wrong("det_category"))?;
    let confs = get("det_confidence")?.1.into_f32().ok_or_else(|| wrong("det_confidence"))?;
    let emb = matrix("det_embedding")?;
    if cats.len() != clips.len() || confs.len() != clips.len() || emb.rows != clips.len() {
        return Err(Error::Data(format!("episode `{id}`: detection arrays disagree in length")));
    }
    let detections = (0..clips.len())
        .map(|i| Detection {
            clip_index: clips[i] as usize,
            category_id: cats[i],
            confidence: confs[i],
            embedding: emb.row(i).to_vec(),
        })
        .collect();
    let record = EpisodeRecord {
        episode_id: id.to_string(),
        clip_features,
        query_tokens,
        noun_embeddings,
        detections,
        gt: entry.gt,
        narrations: entry.narrations.clone(),
        meta: entry.meta.clone(),
    };
    record.validate()?;
    Ok(record)
}
