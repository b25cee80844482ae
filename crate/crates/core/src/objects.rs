//! Noun-conditioned selection of detected object categories and assembly of
//! the padded per-clip object bank.

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

/// One detector output, with the text embedding of its category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub clip_index: usize,
    pub category_id: u32,
    pub confidence: f32,
    pub embedding: Vec<f32>,
}

/// Object selection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectConfig {
    /// Detections need confidence strictly above this.
    pub theta: f64,
    pub sim_threshold: f64,
    /// Slots per clip.
    pub n_o: usize,
}

impl Default for ObjectConfig {
    fn default() -> Self {
        Self { theta: 0.6, sim_threshold: 0.5, n_o: 4 }
    }
}

impl ObjectConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(crate::Error::config("objects.theta", "must lie in [0, 1]"));
        }
        if !(-1.0..=1.0).contains(&self.sim_threshold) {
            return Err(crate::Error::config("objects.sim_threshold", "must lie in [-1, 1]"));
        }
        if self.n_o == 0 {
            return Err(crate::Error::config("objects.n_o", "need at least one slot"));
        }
        Ok(())
    }
}

/// Per-clip object slots `[T x N_o x D_o]`, stored as `[T·N_o x D_o]` rows.
/// Slot `(t, s)` is row `t * n_o + s`. Unmasked slots are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectBank {
    pub clips: usize,
    pub slots: usize,
    pub features: Tensor,
    pub mask: Vec<bool>,
    /// Category id per filled slot, for inspection.
    pub categories: Vec<Option<u32>>,
}

impl ObjectBank {
    pub fn empty(clips: usize, slots: usize, dim: usize) -> Self {
        Self {
            clips,
            slots,
            features: Tensor::zeros(clips * slots, dim),
            mask: vec![false; clips * slots],
            categories: vec![None; clips * slots],
        }
    }

    pub fn num_filled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn slot(&self, clip: usize, slot: usize) -> usize {
        clip * self.slots + slot
    }
}

fn cosine(a: &[f64], b: &[f32]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum::<f64>() / (na * nb))
}

/// Slack for comparing cosines of `f32`-stored embeddings with a threshold.
const COSINE_EPS: f64 = 1e-6;

/// True iff some query noun has cosine similarity `>= sim_threshold` with
/// the category embedding, up to `f32` rounding. Zero-norm embeddings never
/// match.
pub fn match_nouns(noun_embeddings: &Tensor, category_embedding: &[f32], sim_threshold: f64) -> bool {
    (0..noun_embeddings.rows()).any(|p| match cosine(noun_embeddings.row(p), category_embedding) {
        Some(c) => c >= sim_threshold - COSINE_EPS,
        None => {
            log::debug!("zero-norm embedding in noun matching; treated as non-match");
            false
        }
    })
}

/// Keeps detections with confidence strictly above `theta` whose category
/// matches a query noun, then the `n_o` most confident per clip.
///
/// Ties are broken by smaller category id, then by input order.
pub fn select_objects(
    detections: &[Detection],
    noun_embeddings: &Tensor,
    theta: f64,
    n_o: usize,
    clips: usize,
    dim: usize,
    sim_threshold: f64,
) -> ObjectBank {
    assert!(n_o >= 1, "at least one object slot per clip");
    let mut bank = ObjectBank::empty(clips, n_o, dim);
    let mut per_clip: Vec<Vec<(usize, &Detection)>> = vec![Vec::new(); clips];
    for (order, det) in detections.iter().enumerate() {
        // confidences are stored as f32, so compare at that precision
        if det.confidence <= theta as f32 || det.clip_index >= clips {
            continue;
        }
        if match_nouns(noun_embeddings, &det.embedding, sim_threshold) {
            per_clip[det.clip_index].push((order, det));
        }
    }
    for (t, mut kept) in per_clip.into_iter().enumerate() {
        kept.sort_by(|(oa, a), (ob, b)| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.category_id.cmp(&b.category_id))
                .then(oa.cmp(ob))
        });
        for (s, (_, det)) in kept.into_iter().take(n_o).enumerate() {
            assert_eq!(det.embedding.len(), dim, "category embedding width");
            let row = bank.slot(t, s);
            for (o, &x) in bank.features.row_mut(row).iter_mut().zip(&det.embedding) {
                *o = x as f64;
            }
            bank.mask[row] = true;
            bank.categories[row] = Some(det.category_id);
        }
    }
    bank
}
