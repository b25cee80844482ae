//! The full grounding network: encoders, fusion stack, pyramid, heads and
//! the shot branch, plus per-episode preparation and the main-branch loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::EpisodeRecord;
use crate::encoders::{ObjectEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{FusionLayer, Heads, Multiscale, PyramidOutputs};
use crate::geometry::{Interval, PyramidLayout};
use crate::infer_eval::{predict, InferConfig, ScoredMoment};
use crate::losses::{assign_positives, diou_loss, focal_loss, AssignmentResult, LossConfig};
use crate::nn::layers::{Builder, Linear};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::objects::{select_objects, ObjectBank, ObjectConfig};
use crate::shots::{nonempty_shots, pure_video_features, segment_shots, Aggregator, ShotConfig, ShotSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub object_layers: usize,
    pub fusion_layers: usize,
    /// Downsampling stages; the pyramid has one more level than this.
    pub pyramid_levels: usize,
    pub ssm_state: usize,
    /// Feedforward hidden width as a multiple of `dim`.
    pub ffn_mult: usize,
    pub tie_directions: bool,
    pub text_positions: bool,
    pub share_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            text_layers: 4,
            object_layers: 4,
            fusion_layers: 4,
            pyramid_levels: 6,
            ssm_state: 8,
            ffn_mult: 4,
            tie_directions: false,
            text_positions: true,
            share_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("model.dim", "must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config("model.heads", "must be positive and divide model.dim"));
        }
        if self.fusion_layers == 0 {
            return Err(Error::config("model.fusion_layers", "need at least one fusion layer"));
        }
        if self.pyramid_levels > 16 {
            return Err(Error::config("model.pyramid_levels", "at most 16"));
        }
        if self.ssm_state == 0 {
            return Err(Error::config("model.ssm_state", "must be positive"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("model.ffn_mult", "must be positive"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

/// Widths of the raw input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub d_v: usize,
    pub d_t: usize,
    pub d_o: usize,
}

/// Which optional paths a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Paths {
    pub objects: bool,
    pub shots: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub text: TextEncoder,
    pub objects: ObjectEncoder,
    pub video_proj: Linear,
    pub fusion: Vec<FusionLayer>,
    pub pyramid: Multiscale,
    pub heads: Heads,
    pub shot_video: Aggregator,
    pub shot_text: Aggregator,
}

/// Parameters that only the object path or the shot branch reads.
pub fn is_branch_param(name: &str) -> bool {
    if name.starts_with("objenc.") || name.starts_with("shots.") {
        return true;
    }
    let mut parts = name.split('.');
    parts.next() == Some("fusion") && matches!(parts.nth(1), Some("object" | "gate"))
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, dims: InputDims, shot_queries: usize, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let (dim, heads, hidden) = (config.dim, config.heads, config.hidden());
        let text = TextEncoder::new(&mut b, dims.d_t, dim, config.text_layers, heads, hidden, config.text_positions);
        let objects = ObjectEncoder::new(&mut b, dims.d_o, dim, config.object_layers, heads, hidden);
        let video_proj = Linear::new(&mut b, "video_proj", dims.d_v, dim);
        let fusion = b.scoped("fusion", |b| {
            (0..config.fusion_layers)
                .map(|i| {
                    b.scoped(&i.to_string(), |b| {
                        FusionLayer::new(b, dim, heads, hidden, config.ssm_state, config.tie_directions)
                    })
                })
                .collect()
        });
        let pyramid = Multiscale::new(&mut b, dim, heads, hidden, config.pyramid_levels);
        let heads_ = Heads::new(&mut b, dim, config.pyramid_levels + 1, config.share_heads);
        let (shot_video, shot_text) = b.scoped("shots", |b| {
            (
                Aggregator::new(b, "video", dim, heads, hidden, shot_queries),
                Aggregator::new(b, "text", dim, heads, hidden, shot_queries),
            )
        });
        let model = Model {
            config: config.clone(),
            dims,
            text,
            objects,
            video_proj,
            fusion,
            pyramid,
            heads: heads_,
            shot_video,
            shot_text,
        };
        Ok((model, store))
    }

    pub fn forward(&self, g: &mut Graph, prep: &PreparedEpisode, paths: Paths) -> ForwardOutput {
        let tokens = g.constant(prep.tokens.clone());
        let query = self.text.forward(g, tokens, vec![true; prep.tokens.rows()]);
        let clips = g.constant(prep.clips.clone());
        let v0 = self.video_proj.forward(g, clips);
        let objects = paths.objects.then(|| self.objects.forward(g, &prep.objects, &query));
        let v = self.fusion.iter().fold(v0, |v, layer| layer.forward(g, v, &query, objects.as_ref()));
        let x0 = g.pad_rows(v, prep.layout.padded_len);
        let levels = self.pyramid.forward(g, x0, &prep.layout);
        let pyramid = self.heads.forward(g, &levels, &prep.layout);
        let shots = (paths.shots && !prep.shot_spans.is_empty()).then(|| {
            let pure = pure_video_features(&self.fusion, g, v0);
            let v_shot = self.shot_video.forward(g, pure, &prep.shot_spans);
            let q_sent = self.shot_text.forward(g, query.tokens, &[(0, prep.tokens.rows())]);
            ShotEmbeddings { q_sent, v_shot }
        });
        ForwardOutput { pyramid, shots }
    }

    /// Main-branch predictions after decoding and SoftNMS.
    pub fn predict(&self, store: &ParamStore, prep: &PreparedEpisode, use_objects: bool, cfg: &InferConfig) -> Vec<ScoredMoment> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, prep, Paths { objects: use_objects, shots: false });
        let cls = g.value(out.pyramid.cls).clone();
        let reg = g.value(out.pyramid.reg).clone();
        predict(&cls, &reg, &out.pyramid.layout, cfg)
    }
}

#[derive(Debug, Clone)]
pub struct ShotEmbeddings {
    /// `[1 x D]`
    pub q_sent: Var,
    /// `[n x D]`, one row per kept shot.
    pub v_shot: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: PyramidOutputs,
    pub shots: Option<ShotEmbeddings>,
}

/// Settings that shape how an episode is turned into model inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrepareConfig {
    pub pyramid_levels: usize,
    pub objects: ObjectConfig,
    pub shots: ShotConfig,
    pub loss: LossConfig,
}

/// An episode with everything the model and losses need precomputed.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub episode_id: String,
    /// `[T x D_v]`
    pub clips: Tensor,
    /// `[L x D_T]`
    pub tokens: Tensor,
    pub objects: ObjectBank,
    pub gt: Interval,
    pub layout: PyramidLayout,
    pub assignment: AssignmentResult,
    pub shot_set: ShotSet,
    /// Clip row spans of the kept (nonzero-length) shots.
    pub shot_spans: Vec<(usize, usize)>,
    pub shot_intervals: Vec<Interval>,
    pub seconds_per_clip: f64,
}

impl PreparedEpisode {
    pub fn num_clips(&self) -> usize {
        self.clips.rows()
    }
}

pub fn prepare(record: &EpisodeRecord, cfg: &PrepareConfig) -> Result<PreparedEpisode> {
    record.validate()?;
    let t = record.num_clips();
    let layout = PyramidLayout::new(t, cfg.pyramid_levels)?;
    let nouns = record.noun_embeddings.to_tensor();
    let objects = select_objects(
        &record.detections,
        &nouns,
        cfg.objects.theta,
        cfg.objects.n_o,
        t,
        record.noun_embeddings.cols,
        cfg.objects.sim_threshold,
    );
    let ranges = cfg.loss.ranges(cfg.pyramid_levels);
    let assignment = assign_positives(&layout, &record.gt, cfg.loss.center_radius, &ranges);
    let seconds_per_clip = record.meta.seconds_per_clip();
    let shot_len = cfg.shots.shot_seconds / seconds_per_clip;
    let shot_set = segment_shots(&record.narrations, t as f64, cfg.shots.mode, shot_len);
    let kept = nonempty_shots(&shot_set);
    let all_spans = shot_set.clip_ranges(t);
    let all_shots = shot_set.shots();
    Ok(PreparedEpisode {
        episode_id: record.episode_id.clone(),
        clips: record.clip_features.to_tensor(),
        tokens: record.query_tokens.to_tensor(),
        objects,
        gt: record.gt,
        layout,
        assignment,
        shot_spans: kept.iter().map(|&i| all_spans[i]).collect(),
        shot_intervals: kept.iter().map(|&i| all_shots[i]).collect(),
        shot_set,
        seconds_per_clip,
    })
}

/// Unnormalized main-branch loss of one episode.
#[derive(Debug, Clone, Copy)]
pub struct MainLoss {
    /// Scalar node `focal + diou`, differentiable w.r.t. the heads.
    pub var: Var,
    pub focal: f64,
    pub diou: f64,
    pub num_positives: usize,
}

pub fn main_loss(g: &mut Graph, out: &PyramidOutputs, prep: &PreparedEpisode, cfg: &LossConfig) -> MainLoss {
    let a = &prep.assignment;
    let p = g.value(out.cls).data().to_vec();
    let (focal, grad_p) = focal_loss(&p, &a.positive, cfg.alpha, cfg.gamma, &a.valid);
    let reg = g.value(out.reg).clone();
    let (diou, grad_reg) = diou_loss(&reg, &a.anchors, &prep.gt, &a.positive);
    let grad_cls = Tensor::from_vec(p.len(), 1, grad_p);
    let var = g.custom_scalar(focal + diou, vec![(out.cls, grad_cls), (out.reg, grad_reg)]);
    MainLoss { var, focal, diou, num_positives: a.num_positives() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_episode, GeneratorConfig, SignalMode, World};
    use crate::nn::gradcheck;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            text_layers: 1,
            object_layers: 1,
            fusion_layers: 2,
            pyramid_levels: 2,
            ssm_state: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_episode(mode: SignalMode) -> (EpisodeRecord, InputDims) {
        let gen = GeneratorConfig {
            t: 8,
            d_v: 8,
            d_t: 8,
            d_o: 8,
            num_categories: 4,
            query_len_min: 4,
            query_len_max: 4,
            signal_mode: mode,
            ..GeneratorConfig::default()
        };
        let world = World::new(&gen);
        let rec = generate_episode(&gen, &world, 11, "tiny".into()).unwrap();
        (rec, InputDims { d_v: 8, d_t: 8, d_o: 8 })
    }

    fn prep_cfg(levels: usize) -> PrepareConfig {
        PrepareConfig { pyramid_levels: levels, objects: ObjectConfig { n_o: 2, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn parameter_names_are_scoped() {
        let (model, store) = Model::new(&tiny_config(), InputDims { d_v: 8, d_t: 8, d_o: 8 }, 4, 0).unwrap();
        assert_eq!(model.fusion.len(), 2);
        for prefix in ["text.", "objenc.", "video_proj.", "fusion.0.", "fusion.1.", "pyramid.", "heads.", "shots.video.", "shots.text."] {
            assert!(store.iter().any(|(_, n, _)| n.starts_with(prefix)), "no params under {prefix}");
        }
        let branch: Vec<&str> = store.iter().map(|(_, n, _)| n).filter(|n| is_branch_param(n)).collect();
        assert!(branch.iter().any(|n| n.starts_with("fusion.0.object.")));
        assert!(branch.iter().any(|n| n.starts_with("fusion.1.gate.")));
        assert!(!branch.iter().any(|n| n.starts_with("fusion.0.query.") || n.starts_with("fusion.0.mix.")));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Model::new(&tiny_config(), InputDims { d_v: 8, d_t: 8, d_o: 8 }, 4, 5).unwrap();
        let (_, b) = Model::new(&tiny_config(), InputDims { d_v: 8, d_t: 8, d_o: 8 }, 4, 5).unwrap();
        for ((_, na, ta), (_, nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn invalid_heads_rejected() {
        let cfg = ModelConfig { dim: 10, heads: 4, ..tiny_config() };
        let err = Model::new(&cfg, InputDims { d_v: 8, d_t: 8, d_o: 8 }, 4, 0).unwrap_err();
        assert!(err.to_string().contains("model.heads"), "{err}");
    }

    #[test]
    fn forward_shapes_and_paths() {
        let (rec, dims) = tiny_episode(SignalMode::Mixed);
        let prep = prepare(&rec, &prep_cfg(2)).unwrap();
        let (model, store) = Model::new(&tiny_config(), dims, 3, 1).unwrap();
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &prep, Paths { objects: true, shots: true });
        assert_eq!(g.shape(out.pyramid.cls), (8 + 4 + 2, 1));
        assert_eq!(g.shape(out.pyramid.reg), (14, 2));
        assert!(g.value(out.pyramid.reg).data().iter().all(|&x| x >= 0.0));
        let shots = out.shots.unwrap();
        assert_eq!(g.shape(shots.q_sent), (1, 8));
        assert_eq!(g.shape(shots.v_shot), (prep.shot_spans.len(), 8));

        // Without the optional paths no branch parameter is read.
        let mut g = Graph::new(&store);
        model.forward(&mut g, &prep, Paths::default());
        assert!(g.used_params().iter().all(|&id| !is_branch_param(store.name(id))));
    }

    #[test]
    fn end_to_end_main_loss_gradients() {
        let (rec, dims) = tiny_episode(SignalMode::Mixed);
        let prep = prepare(&rec, &prep_cfg(2)).unwrap();
        assert!(prep.assignment.num_positives() > 0);
        let (model, store) = Model::new(&tiny_config(), dims, 2, 3).unwrap();
        let loss_cfg = LossConfig::default();
        let f = |g: &mut Graph| {
            let out = model.forward(g, &prep, Paths { objects: true, shots: false });
            main_loss(g, &out.pyramid, &prep, &loss_cfg).var
        };
        let ids: Vec<_> = store.ids().collect();
        let report = gradcheck::check(&store, &ids, f, 1e-5, 6, 1e-6);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
