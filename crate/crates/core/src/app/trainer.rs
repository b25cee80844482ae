//! Two-phase training, evaluation and the ablation matrix.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::app::checkpoint::{check_layout, Checkpoint};
use crate::app::config::{Phase, RunConfig};
use crate::app::optim::{lr_at, AdamW};
use crate::app::report::{
    AblationReport, AblationRow, AblationRun, EpochRecord, StepRecord, TrainReport, ABLATION_SCHEMA, TRAIN_SCHEMA,
};
use crate::dataio::{episode_seed, generate_split, read_dataset, stable_hash, write_dataset, DatasetManifest, EpisodeRecord};
use crate::error::{Error, Result};
use crate::geometry::Interval;
use crate::infer_eval::{standard_metrics, ScoredMoment};
use crate::losses::{cosine_matrix, infonce, ContrastiveBatch, LossNormalizer};
use crate::model::{is_branch_param, main_loss, prepare, Model, Paths, PreparedEpisode};
use crate::nn::{Grads, Graph, ParamStore, Tensor};
use crate::shots::{positive_pairs, ShotMode};

pub const SPLITS: [&str; 3] = ["pretrain", "train", "val"];

/// Episodes of every split.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub pretrain: Vec<EpisodeRecord>,
    pub train: Vec<EpisodeRecord>,
    pub val: Vec<EpisodeRecord>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&[EpisodeRecord]> {
        match name {
            "pretrain" => Some(&self.pretrain),
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            _ => None,
        }
    }

    /// The split a phase trains on.
    pub fn training(&self, phase: Phase) -> &[EpisodeRecord] {
        match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Finetune => &self.train,
        }
    }
}

fn split_seed(seed: u64, split: &str) -> u64 {
    let tag = SPLITS.iter().position(|&s| s == split).expect("known split") as u64;
    episode_seed(seed, 0x5eed_0000 + tag)
}

/// Generates every split from the config.
pub fn generate_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    let gen = |name: &str, n: usize| generate_split(&cfg.data, split_seed(d.seed, name), n, name);
    Ok(Splits { pretrain: gen("pretrain", d.pretrain_size)?, train: gen("train", d.train_size)?, val: gen("val", d.val_size)? })
}

/// Reads splits from `dataset.dir` when set, otherwise generates them.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let Some(dir) = &cfg.dataset.dir else {
        return generate_splits(cfg);
    };
    let read = |name: &str| -> Result<Vec<EpisodeRecord>> {
        let root = dir.join(name);
        if root.join("manifest.json").exists() {
            read_dataset(&root)
        } else {
            Ok(Vec::new())
        }
    };
    let splits = Splits { pretrain: read("pretrain")?, train: read("train")?, val: read("val")? };
    if splits.train.is_empty() && splits.pretrain.is_empty() {
        return Err(Error::Data(format!("no training episodes under {}", dir.display())));
    }
    Ok(splits)
}

/// Writes every split under `out/<split>/`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<DatasetManifest>> {
    let splits = generate_splits(cfg)?;
    let hash = stable_hash(&(&cfg.data, &cfg.dataset.seed));
    SPLITS
        .iter()
        .map(|&name| write_dataset(splits.get(name).expect("known split"), &out.join(name), &hash))
        .collect()
}

pub fn prepare_all(records: &[EpisodeRecord], cfg: &RunConfig) -> Result<Vec<PreparedEpisode>> {
    let pc = cfg.prepare_config();
    records.iter().map(|r| prepare(r, &pc)).collect()
}

/// Metrics plus the per-episode predictions they were computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: BTreeMap<String, f64>,
    pub predictions: Vec<Vec<ScoredMoment>>,
}

/// Mean cosine similarity of positive and negative query-shot pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotAlignment {
    pub positive_mean: f64,
    pub negative_mean: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl ShotAlignment {
    pub fn margin(&self) -> f64 {
        self.positive_mean - self.negative_mean
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub normalizer: LossNormalizer,
    /// Completed epochs.
    pub epoch: usize,
    pub notes: Vec<String>,
    frozen: Vec<bool>,
}

impl Trainer {
    /// Fresh model, or one initialized from a checkpoint.
    ///
    /// A checkpoint of the same phase resumes the run and must carry the
    /// same config hash. A pretrain checkpoint seeds a fine-tune run with
    /// its main-branch weights; the object and shot parameters stay fresh.
    pub fn new(config: RunConfig, init: Option<&Checkpoint>) -> Result<Self> {
        config.validate()?;
        let (model, mut store) = Model::new(&config.model, config.input_dims(), config.shots.queries, config.seed)?;
        let mut optimizer = AdamW::new(store.len());
        let mut normalizer = LossNormalizer::new(config.loss.momentum);
        let mut epoch = 0;
        let mut resumed = false;
        let mut notes = Vec::new();
        if config.phase == Phase::Pretrain {
            notes.push("pretraining uses a larger synthetic split in place of a narration-query corpus".into());
        }
        match init {
            Some(ck) if ck.config.phase == config.phase => {
                if ck.config_hash() != config.hash() {
                    return Err(Error::config(
                        "init",
                        format!("config hash {} differs from the checkpoint's {}; refusing to resume", config.hash(), ck.config_hash()),
                    ));
                }
                check_layout(&store, &ck.store)?;
                store = ck.store.clone();
                optimizer = ck.optimizer.clone();
                normalizer = ck.normalizer;
                epoch = ck.epoch;
                resumed = true;
                notes.push(format!("resumed after epoch {epoch}"));
            }
            Some(ck) if ck.config.phase == Phase::Pretrain => {
                check_layout(&store, &ck.store)?;
                let ids: Vec<_> = store.ids().collect();
                for id in ids {
                    if !is_branch_param(store.name(id)) {
                        *store.get_mut(id) = ck.store.get(id).clone();
                    }
                }
                notes.push("object and shot parameters are freshly initialized, not pretrained".into());
            }
            Some(_) => return Err(Error::config("init", "cannot pretrain from a fine-tuned checkpoint")),
            None => {}
        }
        if config.phase == Phase::Finetune && !resumed && config.optim.init_object_from_query {
            copy_query_into_object(&mut store, config.model.fusion_layers);
            notes.push("object cross-attention initialized from query cross-attention".into());
        }
        let frozen = store.iter().map(|(_, name, _)| config.phase == Phase::Pretrain && is_branch_param(name)).collect();
        Ok(Self { config, model, store, optimizer, normalizer, epoch, notes, frozen })
    }

    /// Restores a trainer exactly as it was saved.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::new(ck.config.clone(), Some(ck))
    }

    pub fn paths(&self) -> Paths {
        Paths { objects: self.config.uses_objects(), shots: self.config.uses_shots() && self.config.loss.lambda > 0.0 }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.optim.batch_size)
    }

    /// One optimization step over a mini-batch.
    pub fn train_step(&mut self, batch: &[&PreparedEpisode], lr: f64) -> StepRecord {
        let paths = self.paths();
        let lambda = self.config.loss.lambda;
        let (mut grads, record) = {
            let mut graphs = Vec::with_capacity(batch.len());
            let mut mains = Vec::with_capacity(batch.len());
            let mut shot_outs = Vec::new();
            for prep in batch {
                let mut g = Graph::new(&self.store);
                let out = self.model.forward(&mut g, prep, paths);
                mains.push(main_loss(&mut g, &out.pyramid, prep, &self.config.loss));
                shot_outs.push(out.shots);
                graphs.push(g);
            }
            let positives: usize = mains.iter().map(|m| m.num_positives).sum();
            let main_sum: f64 = mains.iter().map(|m| m.focal + m.diou).sum();
            let c = self.normalizer.update(positives);

            // Contrastive term across the batch, computed outside the graphs.
            let mut contrastive = 0.0;
            let mut shot_seeds: Vec<Vec<(crate::nn::Var, Tensor)>> = vec![Vec::new(); batch.len()];
            if paths.shots {
                let members: Vec<usize> = (0..batch.len()).filter(|&i| shot_outs[i].is_some()).collect();
                let mut q_rows = Vec::new();
                let mut s_rows = Vec::new();
                let mut videos = Vec::new();
                let mut gts = Vec::new();
                let mut offsets = Vec::new();
                for &i in &members {
                    let so = shot_outs[i].as_ref().expect("member has shots");
                    q_rows.push(graphs[i].value(so.q_sent).clone());
                    let v = graphs[i].value(so.v_shot).clone();
                    let base = s_rows.len();
                    offsets.push(base);
                    videos.push(batch[i].shot_intervals.iter().enumerate().map(|(k, &iv)| (base + k, iv)).collect());
                    gts.push(batch[i].gt);
                    s_rows.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
                }
                if !members.is_empty() {
                    let dim = q_rows[0].cols();
                    let queries = Tensor::from_vec(q_rows.len(), dim, q_rows.iter().flat_map(|t| t.data().to_vec()).collect());
                    let shots = Tensor::from_vec(s_rows.len(), dim, s_rows.concat());
                    let batch_c = ContrastiveBatch { queries, shots, positives: positive_pairs(&gts, &videos), tau: self.config.loss.tau };
                    let out = infonce(&batch_c);
                    contrastive = out.loss;
                    let k = lambda / c;
                    for (j, &i) in members.iter().enumerate() {
                        let so = shot_outs[i].as_ref().expect("member has shots");
                        let mut gq = Tensor::from_vec(1, dim, out.grad_queries.row(j).to_vec());
                        gq.scale_in_place(k);
                        let n = graphs[i].shape(so.v_shot).0;
                        let mut gs = Tensor::from_vec(n, dim, (0..n).flat_map(|r| out.grad_shots.row(offsets[j] + r).to_vec()).collect());
                        gs.scale_in_place(k);
                        shot_seeds[i] = vec![(so.q_sent, gq), (so.v_shot, gs)];
                    }
                }
            }

            let mut grads = Grads::new(self.store.len());
            for (i, g) in graphs.iter().enumerate() {
                let mut seeds = vec![(mains[i].var, Tensor::scalar(1.0 / c))];
                seeds.append(&mut shot_seeds[i]);
                grads.merge(&g.backward_seeded(&seeds));
            }
            let loss = (main_sum + lambda * contrastive) / c;
            let record = StepRecord {
                epoch: self.epoch + 1,
                step: self.optimizer.step + 1,
                lr,
                loss,
                main: main_sum,
                contrastive,
                normalizer: c,
                grad_norm: 0.0,
            };
            (grads, record)
        };
        let norm = AdamW::clip(&mut grads, self.config.optim.grad_clip);
        self.optimizer.update(&mut self.store, &grads, &self.config.optim, lr, &self.frozen);
        StepRecord { grad_norm: norm, ..record }
    }

    /// Runs one epoch; returns its step records.
    pub fn train_epoch(&mut self, data: &[PreparedEpisode]) -> Vec<StepRecord> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(self.config.seed, self.epoch as u64));
        order.shuffle(&mut rng);
        let spe = self.steps_per_epoch(data.len());
        let total = spe * self.config.optim.total_epochs;
        let warmup = spe * self.config.optim.warmup_epochs;
        let mut steps = Vec::with_capacity(spe);
        for chunk in order.chunks(self.config.optim.batch_size) {
            let batch: Vec<&PreparedEpisode> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = lr_at(self.config.optim.lr, self.optimizer.step as usize, warmup, total);
            let rec = self.train_step(&batch, lr);
            log::debug!("epoch {} step {} loss {:.6}", rec.epoch, rec.step, rec.loss);
            steps.push(rec);
        }
        self.epoch += 1;
        steps
    }

    pub fn predict(&self, prep: &PreparedEpisode) -> Vec<ScoredMoment> {
        self.model.predict(&self.store, prep, self.config.uses_objects(), &self.config.infer)
    }

    pub fn evaluate(&self, data: &[PreparedEpisode]) -> Result<Evaluation> {
        let predictions: Vec<Vec<ScoredMoment>> = data.iter().map(|p| self.predict(p)).collect();
        let gts: Vec<Interval> = data.iter().map(|p| p.gt).collect();
        Ok(Evaluation { metrics: standard_metrics(&predictions, &gts)?, predictions })
    }

    /// Cosine similarity of sentence and shot embeddings over a held-out
    /// set: every query against every shot of every episode.
    pub fn shot_alignment(&self, data: &[PreparedEpisode]) -> ShotAlignment {
        let mut queries = Vec::new();
        let mut shots = Vec::new();
        let mut videos = Vec::new();
        let mut gts = Vec::new();
        let paths = Paths { objects: self.config.uses_objects(), shots: true };
        for prep in data {
            let mut g = Graph::new(&self.store);
            let Some(so) = self.model.forward(&mut g, prep, paths).shots else { continue };
            queries.push(g.value(so.q_sent).clone());
            let v = g.value(so.v_shot);
            let base = shots.len();
            videos.push(prep.shot_intervals.iter().enumerate().map(|(k, &iv)| (base + k, iv)).collect::<Vec<_>>());
            gts.push(prep.gt);
            shots.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        let dim = self.config.model.dim;
        let q = Tensor::from_vec(queries.len(), dim, queries.iter().flat_map(|t| t.data().to_vec()).collect());
        let s = Tensor::from_vec(shots.len(), dim, shots.concat());
        let sim = cosine_matrix(&q, &s);
        let pos = positive_pairs(&gts, &videos);
        let (mut ps, mut pn, mut ns, mut nn) = (0.0, 0, 0.0, 0);
        for i in 0..sim.rows() {
            for j in 0..sim.cols() {
                if pos.contains(&(i, j)) {
                    ps += sim.get(i, j);
                    pn += 1;
                } else {
                    ns += sim.get(i, j);
                    nn += 1;
                }
            }
        }
        ShotAlignment { positive_mean: ps / pn.max(1) as f64, negative_mean: ns / nn.max(1) as f64, positives: pn, negatives: nn }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            normalizer: self.normalizer,
        }
    }

    /// Trains until `total_epochs` (or `stop_after` more epochs), with
    /// optional per-epoch validation.
    pub fn run(&mut self, train: &[PreparedEpisode], val: &[PreparedEpisode], stop_after: Option<usize>) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut report = TrainReport {
            schema: TRAIN_SCHEMA.into(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            phase: self.config.phase,
            use_objects: self.config.uses_objects(),
            use_shot_branch: self.config.uses_shots(),
            train_episodes: train.len(),
            val_episodes: val.len(),
            notes: self.notes.clone(),
            epochs: Vec::new(),
            steps: Vec::new(),
            final_metrics: None,
        };
        let last = self.config.optim.total_epochs.min(stop_after.map_or(usize::MAX, |n| self.epoch + n));
        while self.epoch < last {
            let started = Instant::now();
            let steps = self.train_epoch(train);
            let n = steps.len() as f64;
            let val_metrics = if self.config.optim.eval_every_epoch && !val.is_empty() {
                Some(self.evaluate(val)?.metrics)
            } else {
                None
            };
            let rec = EpochRecord {
                epoch: self.epoch,
                lr: steps.last().map_or(0.0, |s| s.lr),
                mean_loss: steps.iter().map(|s| s.loss).sum::<f64>() / n,
                mean_main: steps.iter().map(|s| s.main).sum::<f64>() / n,
                mean_contrastive: steps.iter().map(|s| s.contrastive).sum::<f64>() / n,
                val: val_metrics,
                seconds: started.elapsed().as_secs_f64(),
            };
            log::info!("epoch {} loss {:.4} val {:?}", rec.epoch, rec.mean_loss, rec.val);
            report.epochs.push(rec);
            report.steps.extend(steps);
        }
        if !val.is_empty() {
            report.final_metrics = Some(self.evaluate(val)?.metrics);
        }
        Ok(report)
    }
}

/// Copies each fusion layer's query cross-attention block into its object
/// block.
pub fn copy_query_into_object(store: &mut ParamStore, layers: usize) {
    for i in 0..layers {
        let prefix = format!("fusion.{i}.query.");
        let pairs: Vec<_> = store
            .iter()
            .filter(|(_, n, _)| n.starts_with(&prefix))
            .map(|(id, n, _)| (id, format!("fusion.{i}.object.{}", &n[prefix.len()..])))
            .collect();
        for (src, dst_name) in pairs {
            let dst = store.id(&dst_name).unwrap_or_else(|| panic!("missing `{dst_name}`"));
            let value = store.get(src).clone();
            *store.get_mut(dst) = value;
        }
    }
}

/// Median of each metric over runs.
pub fn median_metrics(runs: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(first) = runs.first() {
        for key in first.keys() {
            let mut v: Vec<f64> = runs.iter().filter_map(|r| r.get(key).copied()).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len();
            let med = if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) };
            out.insert(key.clone(), med);
        }
    }
    out
}

/// Fine-tunes from scratch on `train` and evaluates on `val`.
pub fn train_and_evaluate(cfg: &RunConfig, train: &[EpisodeRecord], val: &[EpisodeRecord]) -> Result<(Trainer, BTreeMap<String, f64>)> {
    let train = prepare_all(train, cfg)?;
    let val = prepare_all(val, cfg)?;
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut trainer = Trainer::new(cfg.clone(), None)?;
    trainer.run(&train, &[], None)?;
    let metrics = trainer.evaluate(&val)?.metrics;
    Ok((trainer, metrics))
}

/// The 2x2 structure matrix over objects and the shot branch, then every
/// shot segmentation mode, each over `ablation.replicates` seeds.
pub fn run_ablate(cfg: &RunConfig, splits: &Splits) -> Result<AblationReport> {
    let mut base = cfg.clone();
    base.phase = Phase::Finetune;
    let seeds: Vec<u64> = (0..cfg.ablation.replicates as u64).map(|r| cfg.seed + r).collect();
    let row = |label: String, variant: RunConfig| -> Result<AblationRow> {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let run_cfg = RunConfig { seed, ..variant.clone() };
            let (_, metrics) = train_and_evaluate(&run_cfg, &splits.train, &splits.val)?;
            log::info!("{label} seed {seed}: {metrics:?}");
            runs.push(AblationRun { seed, config_hash: run_cfg.hash(), metrics });
        }
        let median = median_metrics(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
        Ok(AblationRow {
            label,
            use_objects: variant.ablation.use_objects,
            use_shot_branch: variant.ablation.use_shot_branch,
            shot_mode: variant.shots.mode,
            runs,
            median,
        })
    };
    let mut structure = Vec::new();
    for (objects, shots) in [(true, true), (true, false), (false, true), (false, false)] {
        let mut v = base.clone();
        v.ablation.use_objects = objects;
        v.ablation.use_shot_branch = shots;
        structure.push(row(format!("objects={objects} shots={shots}"), v)?);
    }
    let mut shot_modes = Vec::new();
    for mode in ShotMode::ALL {
        let mut v = base.clone();
        v.ablation.use_shot_branch = true;
        v.shots.mode = mode;
        shot_modes.push(row(mode.label().to_string(), v)?);
    }
    Ok(AblationReport {
        schema: ABLATION_SCHEMA.into(),
        config_hash: cfg.hash(),
        seeds,
        structure,
        shot_modes,
        notes: vec!["every row fine-tunes from scratch on the training split and reports the validation split".into()],
    })
}
