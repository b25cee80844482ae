//! Decoding pyramid outputs into scored moments, Gaussian SoftNMS and the
//! Rank@m, IoU=n metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_anchor, iou, AnchorPoint, Interval, PyramidLayout};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredMoment {
    pub interval: Interval,
    pub score: f64,
    pub source: AnchorPoint,
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub sigma: f64,
    pub pre_nms_floor: f64,
    pub pre_nms_topk: usize,
    pub score_floor: f64,
    pub max_keep: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { sigma: 0.5, pre_nms_floor: 1e-3, pre_nms_topk: 200, score_floor: 1e-3, max_keep: 5 }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config("infer.sigma", "must be positive"));
        }
        if self.max_keep == 0 || self.pre_nms_topk == 0 {
            return Err(Error::config("infer.max_keep", "max_keep and pre_nms_topk must be positive"));
        }
        if !(0.0..1.0).contains(&self.pre_nms_floor) || !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::config("infer.pre_nms_floor", "floors must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Ordering by score descending, then level and index ascending.
fn rank_order(a: &ScoredMoment, b: &ScoredMoment) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source.level.cmp(&b.source.level))
        .then(a.source.index.cmp(&b.source.index))
}

/// Turns every unpadded anchor with confidence above `floor` into a moment
/// clamped to `[0, T]`, keeping the `topk` best.
///
/// `cls: [N x 1]`, `reg: [N x 2]` in `layout.anchors()` order.
pub fn decode_predictions(cls: &Tensor, reg: &Tensor, layout: &PyramidLayout, floor: f64, topk: usize) -> Vec<ScoredMoment> {
    let anchors = layout.anchors();
    assert_eq!(cls.rows(), anchors.len());
    assert_eq!(reg.shape(), (anchors.len(), 2));
    let t = layout.valid_len as f64;
    let mut out: Vec<ScoredMoment> = anchors
        .iter()
        .enumerate()
        .filter(|(i, (_, valid))| *valid && cls.get(*i, 0) > floor)
        .map(|(i, (a, _))| ScoredMoment {
            interval: decode_anchor(*a, reg.get(i, 0), reg.get(i, 1)).clamp(0.0, t),
            score: cls.get(i, 0),
            source: *a,
        })
        .collect();
    out.sort_by(rank_order);
    out.truncate(topk);
    out
}

/// Gaussian SoftNMS: repeatedly emit the best remaining moment and decay
/// the others by `exp(-iou²/σ)`; moments falling below `score_floor` are
/// dropped. Output is in emission order, which is score-descending.
pub fn soft_nms(moments: &[ScoredMoment], sigma: f64, score_floor: f64, max_keep: usize) -> Vec<ScoredMoment> {
    assert!(sigma > 0.0);
    let mut pool: Vec<ScoredMoment> = moments.to_vec();
    let mut kept = Vec::with_capacity(max_keep.min(pool.len()));
    while kept.len() < max_keep && !pool.is_empty() {
        let best = (0..pool.len()).min_by(|&i, &j| rank_order(&pool[i], &pool[j])).unwrap();
        let top = pool.swap_remove(best);
        kept.push(top);
        for m in pool.iter_mut() {
            let o = iou(&top.interval, &m.interval);
            m.score *= (-o * o / sigma).exp();
        }
        pool.retain(|m| m.score >= score_floor);
    }
    kept
}

/// Decode then SoftNMS, as used at inference.
pub fn predict(cls: &Tensor, reg: &Tensor, layout: &PyramidLayout, cfg: &InferConfig) -> Vec<ScoredMoment> {
    let candidates = decode_predictions(cls, reg, layout, cfg.pre_nms_floor, cfg.pre_nms_topk);
    soft_nms(&candidates, cfg.sigma, cfg.score_floor, cfg.max_keep)
}

/// Percentage of queries with a moment of IoU strictly above `n_iou` among
/// their top `m` predictions. Each prediction list must already be ranked.
pub fn rank_at_m(predictions: &[Vec<ScoredMoment>], gts: &[Interval], m: usize, n_iou: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Eval("no queries to evaluate".into()));
    }
    if predictions.len() != gts.len() {
        return Err(Error::Eval(format!("{} prediction lists for {} queries", predictions.len(), gts.len())));
    }
    assert!(m >= 1, "m must be at least 1");
    let hits = predictions
        .iter()
        .zip(gts)
        .filter(|(preds, gt)| preds.iter().take(m).any(|p| iou(&p.interval, gt) > n_iou))
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// The four standard metric keys.
pub const METRIC_KEYS: [(&str, usize, f64); 4] = [("R@1,0.3", 1, 0.3), ("R@1,0.5", 1, 0.5), ("R@5,0.3", 5, 0.3), ("R@5,0.5", 5, 0.5)];

/// R@{1,5} at IoU {0.3, 0.5} plus the query count.
pub fn standard_metrics(predictions: &[Vec<ScoredMoment>], gts: &[Interval]) -> Result<std::collections::BTreeMap<String, f64>> {
    let mut out = std::collections::BTreeMap::new();
    for (key, m, n) in METRIC_KEYS {
        out.insert(key.to_string(), rank_at_m(predictions, gts, m, n)?);
    }
    out.insert("num_queries".to_string(), predictions.len() as f64);
    Ok(out)
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub episode_id: String,
    pub start_seconds: f64,
    pub end_seconds: f64,
    pub score: f64,
}

pub fn prediction_records(episode_id: &str, moments: &[ScoredMoment], seconds_per_clip: f64) -> Vec<PredictionRecord> {
    moments
        .iter()
        .map(|m| {
            let (s, e) = m.interval.to_seconds(seconds_per_clip);
            PredictionRecord { episode_id: episode_id.to_string(), start_seconds: s, end_seconds: e, score: m.score }
        })
        .collect()
}

/// Line-delimited JSON.
pub fn to_jsonl(records: &[PredictionRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
}
