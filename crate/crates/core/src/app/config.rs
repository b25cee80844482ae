//! Run configuration: one TOML document with a section per concern.
//!
//! Unknown keys are rejected everywhere. `key.path=value` overrides are
//! applied to the parsed document before it is typed, so they go through
//! exactly the same checks as file keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{stable_hash, GeneratorConfig};
use crate::error::{Error, Result};
use crate::infer_eval::InferConfig;
use crate::losses::LossConfig;
use crate::model::{InputDims, ModelConfig, PrepareConfig};
use crate::objects::ObjectConfig;
use crate::shots::ShotConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::config("phase", format!("unknown phase `{other}` (pretrain | finetune)"))),
        }
    }
}

/// Split sizes, the data seed and an optional on-disk dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub pretrain_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Directory written by `synth`; splits are generated in memory when absent.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 7, pretrain_size: 400, train_size: 200, val_size: 100, dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Copy query cross-attention weights into the object block at fine-tune start.
    pub init_object_from_query: bool,
    /// Evaluate on the validation split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 8e-4,
            warmup_epochs: 4,
            total_epochs: 10,
            weight_decay: 0.05,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init_object_from_query: true,
            eval_every_epoch: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("optim.total_epochs", "must be positive"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config("optim.warmup_epochs", "cannot exceed total_epochs"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be nonnegative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("optim.grad_clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub use_objects: bool,
    pub use_shot_branch: bool,
    /// Seeds per ablation row.
    pub replicates: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { use_objects: true, use_shot_branch: true, replicates: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phase: Phase,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: GeneratorConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub shots: ShotConfig,
    #[serde(default)]
    pub objects: ObjectConfig,
    #[serde(default)]
    pub infer: InferConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phase: Phase::Finetune,
            model: ModelConfig::default(),
            data: GeneratorConfig::default(),
            dataset: DatasetConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            shots: ShotConfig::default(),
            objects: ObjectConfig::default(),
            infer: InferConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        for spec in overrides {
            apply_override(&mut doc, spec)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            Error::config(field_from_message(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.optim.validate()?;
        self.loss.validate(self.model.pyramid_levels)?;
        self.shots.validate()?;
        self.objects.validate()?;
        self.infer.validate()?;
        if self.dataset.train_size == 0 {
            return Err(Error::config("dataset.train_size", "must be positive"));
        }
        if self.ablation.replicates == 0 {
            return Err(Error::config("ablation.replicates", "must be positive"));
        }
        Ok(())
    }

    /// Stable digest of every setting.
    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims { d_v: self.data.d_v, d_t: self.data.d_t, d_o: self.data.d_o }
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            pyramid_levels: self.model.pyramid_levels,
            objects: self.objects.clone(),
            shots: self.shots.clone(),
            loss: self.loss.clone(),
        }
    }

    /// Whether this phase reads the object path and the shot branch.
    pub fn uses_objects(&self) -> bool {
        self.phase == Phase::Finetune && self.ablation.use_objects
    }

    pub fn uses_shots(&self) -> bool {
        self.phase == Phase::Finetune && self.ablation.use_shot_branch
    }
}

/// Pulls the offending key out of a serde message such as
/// "unknown field `foo`, expected ...".
fn field_from_message(msg: &str) -> String {
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into())
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like `key.path=value`"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("nonempty path");
    let mut table = doc;
    for key in parents {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::config(path, format!("`{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
