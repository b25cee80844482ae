//! Checkpoints: a directory with `checkpoint.json` plus raw `f64` arrays
//! for the parameters and the optimizer moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::app::config::RunConfig;
use crate::app::optim::AdamW;
use crate::dataio::{container, ArrayData, ArraySpec};
use crate::error::{Error, Result};
use crate::losses::LossNormalizer;
use crate::model::Model;
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    has_moments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    config: RunConfig,
    epoch: usize,
    adam_step: u64,
    normalizer: LossNormalizer,
    params: Vec<ParamEntry>,
    values: ArraySpec,
    first_moments: ArraySpec,
    second_moments: ArraySpec,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub normalizer: LossNormalizer,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut values = Vec::with_capacity(self.store.num_scalars());
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut params = Vec::with_capacity(self.store.len());
        for (id, name, t) in self.store.iter() {
            values.extend_from_slice(t.data());
            let moments = self.optimizer.moments.get(id.index()).and_then(Option::as_ref);
            if let Some((m, v)) = moments {
                first.extend_from_slice(m.data());
                second.extend_from_slice(v.data());
            }
            params.push(ParamEntry { name: name.to_string(), rows: t.rows(), cols: t.cols(), has_moments: moments.is_some() });
        }
        let write = |name: &str, data: Vec<f64>| {
            let len = data.len();
            container::write_array(dir, &format!("{name}.f64"), &[len], &ArrayData::F64(data))
        };
        let header = Header {
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            epoch: self.epoch,
            adam_step: self.optimizer.step,
            normalizer: self.normalizer,
            params,
            values: write("values", values)?,
            first_moments: write("first_moments", first)?,
            second_moments: write("second_moments", second)?,
        };
        container::write_json(&dir.join("checkpoint.json"), &header)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("checkpoint.json");
        if !path.exists() {
            return Err(Error::Checkpoint(format!("no checkpoint.json in {}", dir.display())));
        }
        let header: Header = container::read_json(&path)?;
        if header.version > CHECKPOINT_VERSION {
            return Err(Error::Version { found: header.version, supported: CHECKPOINT_VERSION });
        }
        if header.config_hash != header.config.hash() {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        let owner = dir.display().to_string();
        let read = |spec: &ArraySpec| -> Result<Vec<f64>> {
            container::read_array(dir, spec, &owner)?
                .into_f64()
                .ok_or_else(|| Error::Checkpoint(format!("array `{}` is not f64", spec.path)))
        };
        let values = read(&header.values)?;
        let first = read(&header.first_moments)?;
        let second = read(&header.second_moments)?;
        let mut store = ParamStore::new();
        let mut optimizer = AdamW::new(header.params.len());
        optimizer.step = header.adam_step;
        let (mut at, mut at_m) = (0, 0);
        for (i, p) in header.params.iter().enumerate() {
            let n = p.rows * p.cols;
            let slice = values.get(at..at + n).ok_or_else(|| Error::Checkpoint("parameter array too short".into()))?;
            store.add(p.name.clone(), Tensor::from_vec(p.rows, p.cols, slice.to_vec()));
            at += n;
            if p.has_moments {
                let m = first.get(at_m..at_m + n);
                let v = second.get(at_m..at_m + n);
                let (Some(m), Some(v)) = (m, v) else {
                    return Err(Error::Checkpoint("moment arrays too short".into()));
                };
                optimizer.moments[i] =
                    Some((Tensor::from_vec(p.rows, p.cols, m.to_vec()), Tensor::from_vec(p.rows, p.cols, v.to_vec())));
                at_m += n;
            }
        }
        if at != values.len() || at_m != first.len() || at_m != second.len() {
            return Err(Error::Checkpoint("array lengths do not match the parameter table".into()));
        }
        Ok(Checkpoint { config: header.config, epoch: header.epoch, store, optimizer, normalizer: header.normalizer })
    }

    /// Rebuilds the model from the stored config and checks the stored
    /// parameters match its layout.
    pub fn model(&self) -> Result<Model> {
        let (model, fresh) = Model::new(&self.config.model, self.config.input_dims(), self.config.shots.queries, self.config.seed)?;
        check_layout(&fresh, &self.store)?;
        Ok(model)
    }
}

/// Errors unless both stores hold the same names and shapes in order.
pub fn check_layout(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    if expected.len() != found.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {}", expected.len(), found.len())));
    }
    for ((_, ne, te), (_, nf, tf)) in expected.iter().zip(found.iter()) {
        if ne != nf || te.shape() != tf.shape() {
            return Err(Error::Checkpoint(format!("parameter `{ne}` {:?} does not match `{nf}` {:?}", te.shape(), tf.shape())));
        }
    }
    Ok(())
}
