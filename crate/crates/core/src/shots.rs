//! Shot branch: narration-driven segmentation, the query-free video stack
//! that reuses the fusion mixers, learnable-query aggregation and the
//! positive pairs for the contrastive loss.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Narration;
use crate::fusion::{CrossBlock, FusionLayer};
use crate::geometry::Interval;
use crate::nn::layers::{Builder, Mlp};
use crate::nn::params::init;
use crate::nn::{AttnLayout, Graph, ParamId, Tensor, Var};

pub const ROTATION_VERBS: &[&str] = &["turns around", "looks around"];
pub const HEAD_MOVEMENT_VERBS: &[&str] = &["walks", "moves around"];
pub const RAPID_MOVEMENT_VERBS: &[&str] = &["rides", "runs", "cycles", "jogs", "jumps"];

/// Default fixed shot length in seconds.
pub const DEFAULT_SHOT_SECONDS: f64 = 13.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotMode {
    /// Rotation verbs only.
    R,
    RHm,
    RHmRm,
    FixedLength,
}

impl ShotMode {
    pub const ALL: [ShotMode; 4] = [ShotMode::R, ShotMode::RHm, ShotMode::RHmRm, ShotMode::FixedLength];

    pub fn label(self) -> &'static str {
        match self {
            ShotMode::R => "R",
            ShotMode::RHm => "R+HM",
            ShotMode::RHmRm => "R+HM+RM",
            ShotMode::FixedLength => "fixed_length",
        }
    }

    /// Verb phrases that open a new shot in this mode.
    pub fn verbs(self) -> Vec<&'static str> {
        let groups: &[&[&str]] = match self {
            ShotMode::R => &[ROTATION_VERBS],
            ShotMode::RHm => &[ROTATION_VERBS, HEAD_MOVEMENT_VERBS],
            ShotMode::RHmRm => &[ROTATION_VERBS, HEAD_MOVEMENT_VERBS, RAPID_MOVEMENT_VERBS],
            ShotMode::FixedLength => &[],
        };
        groups.iter().flat_map(|g| g.iter().copied()).collect()
    }
}

/// Shot-branch settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotConfig {
    pub mode: ShotMode,
    /// Fixed-length mode shot duration, in seconds.
    pub shot_seconds: f64,
    /// Learnable aggregation queries per shot.
    pub queries: usize,
}

impl Default for ShotConfig {
    fn default() -> Self {
        Self { mode: ShotMode::R, shot_seconds: DEFAULT_SHOT_SECONDS, queries: 4 }
    }
}

impl ShotConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.shot_seconds > 0.0) {
            return Err(crate::Error::config("shots.shot_seconds", "must be positive"));
        }
        if self.queries == 0 {
            return Err(crate::Error::config("shots.queries", "must be positive"));
        }
        Ok(())
    }
}

/// Boundaries `0 = t_1 < … < t_{N_S+1} = T` and the shots between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSet {
    pub boundaries: Vec<f64>,
}

impl ShotSet {
    /// Builds a tiling of `[0, t]` from interior cut points (any order,
    /// duplicates and out-of-range points dropped).
    pub fn from_cuts(cuts: impl IntoIterator<Item = f64>, t: f64) -> Self {
        let mut inner: Vec<f64> = cuts.into_iter().filter(|&c| c > 0.0 && c < t).collect();
        inner.sort_by(f64::total_cmp);
        inner.dedup();
        let mut boundaries = Vec::with_capacity(inner.len() + 2);
        boundaries.push(0.0);
        boundaries.extend(inner);
        boundaries.push(t);
        Self { boundaries }
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shots(&self) -> Vec<Interval> {
        self.boundaries.windows(2).map(|w| Interval { start: w[0], end: w[1] }).collect()
    }

    /// Clip rows `[lo, hi)` whose unit span overlaps each shot.
    pub fn clip_ranges(&self, clips: usize) -> Vec<(usize, usize)> {
        self.shots()
            .iter()
            .map(|s| {
                let lo = (s.start.floor() as usize).min(clips.saturating_sub(1));
                let hi = (s.end.ceil() as usize).clamp(lo + 1, clips);
                (lo, hi)
            })
            .collect()
    }
}

/// Splits `[0, t]` at narrations containing an active verb phrase
/// (case-insensitive), or every `shot_len` clips in fixed-length mode.
pub fn segment_shots(narrations: &[Narration], t: f64, mode: ShotMode, shot_len: f64) -> ShotSet {
    if mode == ShotMode::FixedLength {
        assert!(shot_len > 0.0, "shot length must be positive");
        let n = (t / shot_len).ceil() as usize;
        return ShotSet::from_cuts((1..n).map(|k| k as f64 * shot_len), t);
    }
    let verbs = mode.verbs();
    let cuts = narrations
        .iter()
        .filter(|n| {
            let text = n.text.to_lowercase();
            verbs.iter().any(|v| text.contains(v))
        })
        .map(|n| n.time);
    ShotSet::from_cuts(cuts, t)
}

/// Query-free video features: the fusion layers' mixing sub-blocks only,
/// applied with the very same parameters.
pub fn pure_video_features(layers: &[FusionLayer], g: &mut Graph, v: Var) -> Var {
    layers.iter().fold(v, |x, layer| layer.mix.forward(g, x))
}

/// `K` learnable queries attend over a key span, then a kernel-3
/// convolution across the `K` slots and a mean give one vector.
#[derive(Debug, Clone, Copy)]
pub struct Aggregator {
    pub queries: ParamId,
    pub block: CrossBlock,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj: Mlp,
    pub k: usize,
}

impl Aggregator {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize, hidden: usize, k: usize) -> Self {
        b.scoped(name, |b| {
            let q = init::normal(b.rng, k, dim, 1.0);
            let queries = b.add("queries", q);
            let block = CrossBlock::new(b, "block", dim, heads, hidden);
            let w = init::xavier(b.rng, 3 * dim, dim);
            let conv_w = b.add("conv.w", w);
            let conv_b = b.add("conv.b", Tensor::zeros(1, dim));
            let proj = Mlp::new(b, "proj", dim, hidden, dim);
            Aggregator { queries, block, conv_w, conv_b, proj, k }
        })
    }

    /// One projected vector per key span: `[spans.len() x D]`.
    pub fn forward(&self, g: &mut Graph, keys: Var, spans: &[(usize, usize)]) -> Var {
        let n = spans.len();
        assert!(n > 0, "need at least one span");
        let q = g.param(self.queries);
        let q = g.repeat_rows(q, n);
        let ranges = spans.iter().flat_map(|&r| std::iter::repeat_n(r, self.k)).collect();
        let layout = Arc::new(AttnLayout { ranges, key_valid: None });
        let slots = self.block.forward(g, q, keys, layout);
        let stacked = g.shift_stack(slots, 3, self.k);
        let w = g.param(self.conv_w);
        let y = g.matmul(stacked, w);
        let b = g.param(self.conv_b);
        let y = g.add_row(y, b);
        let pooled = g.group_mean(y, self.k);
        self.proj.forward(g, pooled)
    }
}

/// Drops zero-length shots (with a warning) and returns the kept indices.
pub fn nonempty_shots(shots: &ShotSet) -> Vec<usize> {
    shots
        .shots()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if s.length() > 0.0 {
                Some(i)
            } else {
                log::warn!("zero-length shot at {} excluded", s.start);
                None
            }
        })
        .collect()
}

/// `(query, shot)` pairs whose ground truth overlaps the shot with positive
/// length. `videos[i]` lists the global shot indices and intervals of the
/// video that query `i` belongs to.
pub fn positive_pairs(gts: &[Interval], videos: &[Vec<(usize, Interval)>]) -> BTreeSet<(usize, usize)> {
    assert_eq!(gts.len(), videos.len());
    let mut out = BTreeSet::new();
    for (i, (gt, shots)) in gts.iter().zip(videos).enumerate() {
        for &(s, shot) in shots {
            if gt.overlap(&shot) > 0.0 {
                out.insert((i, s));
            }
        }
    }
    out
}
