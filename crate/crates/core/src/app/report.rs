//! JSON reports written by the trainer, the evaluator and the ablation
//! runner. Each carries a schema id naming its file under `schemas/`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::app::config::Phase;
use crate::shots::ShotMode;

pub const TRAIN_SCHEMA: &str = "train_report.schema.json";
pub const EVAL_SCHEMA: &str = "eval_report.schema.json";
pub const ABLATION_SCHEMA: &str = "ablation_report.schema.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// `(L_ML + λ·L_con) / C` for the batch.
    pub loss: f64,
    /// Summed focal and DIoU terms before normalization.
    pub main: f64,
    pub contrastive: f64,
    pub normalizer: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_main: f64,
    pub mean_contrastive: f64,
    pub val: Option<BTreeMap<String, f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub phase: Phase,
    pub use_objects: bool,
    pub use_shot_branch: bool,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub notes: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub final_metrics: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config_hash: String,
    pub checkpoint_epoch: usize,
    pub dataset: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub use_objects: bool,
    pub use_shot_branch: bool,
    pub shot_mode: ShotMode,
    pub runs: Vec<AblationRun>,
    pub median: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub structure: Vec<AblationRow>,
    pub shot_modes: Vec<AblationRow>,
    pub notes: Vec<String>,
}

impl AblationReport {
    /// Plain-text comparison table, one line per row.
    pub fn table(&self) -> String {
        let keys = crate::infer_eval::METRIC_KEYS.map(|(k, _, _)| k);
        let mut out = format!("{:<28}", "row");
        for k in keys {
            out += &format!("{k:>10}");
        }
        out.push('\n');
        for row in self.structure.iter().chain(&self.shot_modes) {
            out += &format!("{:<28}", row.label);
            for k in keys {
                out += &format!("{:>10.2}", row.median.get(k).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }
}
