//! Positive-candidate assignment and the training losses: focal
//! classification, 1-D distance-IoU regression, symmetric multi-positive
//! InfoNCE, and the momentum-normalized total.
//!
//! Every loss is a plain function returning its value together with the
//! analytic gradient w.r.t. its inputs; the model graph splices them in as
//! custom nodes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geometry::{diou_terms, AnchorPoint, Interval, PyramidLayout};
use crate::nn::Tensor;

/// Per-level regression ranges `(lo, hi]` in clip units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRanges(pub Vec<(f64, f64)>);

impl LevelRanges {
    /// `(0,4], (4,8], (8,16], …, (2^{L+1}, ∞)` for levels `0..=L`.
    pub fn standard(levels: usize) -> Self {
        let ranges = (0..=levels)
            .map(|j| {
                let lo = if j == 0 { 0.0 } else { (1u64 << (j + 1)) as f64 };
                let hi = if j == levels { f64::INFINITY } else { (1u64 << (j + 2)) as f64 };
                (lo, hi)
            })
            .collect();
        Self(ranges)
    }

    pub fn get(&self, level: usize) -> (f64, f64) {
        self.0[level]
    }
}

/// Loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub momentum: f64,
    pub center_radius: f64,
    /// Custom per-level ranges; the standard doubling ranges when absent.
    pub level_ranges: Option<LevelRanges>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0, lambda: 0.5, tau: 0.07, momentum: 0.9, center_radius: 1.5, level_ranges: None }
    }
}

impl LossConfig {
    pub fn validate(&self, levels: usize) -> crate::Result<()> {
        use crate::Error;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha", "must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("loss.gamma", "must be nonnegative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda", "must be nonnegative"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("loss.tau", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("loss.momentum", "must lie in [0, 1)"));
        }
        if !(self.center_radius > 0.0) {
            return Err(Error::config("loss.center_radius", "must be positive"));
        }
        if let Some(r) = &self.level_ranges {
            if r.0.len() != levels + 1 {
                return Err(Error::config("loss.level_ranges", format!("need {} ranges, one per level", levels + 1)));
            }
            if r.0.iter().any(|&(lo, hi)| !(lo < hi) || lo < 0.0) {
                return Err(Error::config("loss.level_ranges", "each range needs 0 <= lo < hi"));
            }
        }
        Ok(())
    }

    pub fn ranges(&self, levels: usize) -> LevelRanges {
        self.level_ranges.clone().unwrap_or_else(|| LevelRanges::standard(levels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Flattened anchor order of the pyramid layout.
    pub positive: Vec<bool>,
    /// `(s*, e*)` for positive anchors, `None` elsewhere.
    pub targets: Vec<Option<(f64, f64)>>,
    pub valid: Vec<bool>,
    pub anchors: Vec<AnchorPoint>,
    /// Set when the ground truth has zero length and nothing was assigned.
    pub degenerate_gt: bool,
}

impl AssignmentResult {
    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn class_targets(&self) -> Vec<bool> {
        self.positive.clone()
    }
}

/// Marks anchors as positive when they fall strictly inside the
/// center-sampling window `(max(t_s, c - r·2^j), min(t_e, c + r·2^j))` and
/// their largest boundary distance `max(t - t_s, t_e - t)` lies in the
/// level's regression range.
pub fn assign_positives(
    layout: &PyramidLayout,
    gt: &Interval,
    center_radius: f64,
    ranges: &LevelRanges,
) -> AssignmentResult {
    let all = layout.anchors();
    let n = all.len();
    let mut out = AssignmentResult {
        positive: vec![false; n],
        targets: vec![None; n],
        valid: all.iter().map(|(_, v)| *v).collect(),
        anchors: all.iter().map(|(a, _)| *a).collect(),
        degenerate_gt: false,
    };
    if gt.length() <= 0.0 {
        log::warn!("zero-length ground truth at {}; no positive anchors", gt.start);
        out.degenerate_gt = true;
        return out;
    }
    let center = gt.center();
    for (i, (anchor, valid)) in all.into_iter().enumerate() {
        if !valid {
            continue;
        }
        let stride = anchor.stride();
        let t = anchor.timestamp();
        let lo_win = gt.start.max(center - center_radius * stride);
        let hi_win = gt.end.min(center + center_radius * stride);
        if !(t > lo_win && t < hi_win) {
            continue;
        }
        let reach = (t - gt.start).max(gt.end - t);
        let (lo, hi) = ranges.get(anchor.level);
        if reach > lo && reach <= hi {
            out.positive[i] = true;
            out.targets[i] = Some(((t - gt.start) / stride, (gt.end - t) / stride));
        }
    }
    out
}

const PROB_EPS: f64 = 1e-12;

/// Sigmoid focal loss summed over valid anchors, with its gradient w.r.t.
/// the confidences.
pub fn focal_loss(p: &[f64], targets: &[bool], alpha: f64, gamma: f64, valid: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), targets.len());
    assert_eq!(p.len(), valid.len());
    let pow_grad = |base: f64| if gamma == 0.0 { 0.0 } else { gamma * base.powf(gamma - 1.0) };
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        if !valid[i] {
            continue;
        }
        let pi = p[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
        if targets[i] {
            let q = 1.0 - pi;
            loss -= alpha * q.powf(gamma) * pi.ln();
            grad[i] = -alpha * (-pow_grad(q) * pi.ln() + q.powf(gamma) / pi);
        } else {
            let q = 1.0 - pi;
            loss -= (1.0 - alpha) * pi.powf(gamma) * q.ln();
            grad[i] = -(1.0 - alpha) * (pow_grad(pi) * q.ln() - pi.powf(gamma) / q);
        }
    }
    (loss, grad)
}

/// `1 - IoU + d²/c²` for one prediction, with its gradient w.r.t. the
/// predicted start and end.
pub fn diou_term_with_grad(pred: &Interval, gt: &Interval) -> (f64, f64, f64) {
    let (ps, pe, gs, ge) = (pred.start, pred.end, gt.start, gt.end);
    let (iou, pen) = diou_terms(pred, gt);
    let value = 1.0 - iou + pen;

    let inter = (pe.min(ge) - ps.max(gs)).max(0.0);
    let union = (pe - ps) + (ge - gs) - inter;
    let (di_s, di_e) = if inter > 0.0 {
        (if ps > gs { -1.0 } else { 0.0 }, if pe < ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let (du_s, du_e) = (-1.0 - di_s, 1.0 - di_e);
    let (diou_s, diou_e) = if union > 0.0 {
        ((di_s * union - inter * du_s) / (union * union), (di_e * union - inter * du_e) / (union * union))
    } else {
        (0.0, 0.0)
    };

    let c = pe.max(ge) - ps.min(gs);
    let (dpen_s, dpen_e) = if c > 0.0 {
        let d = pred.center() - gt.center();
        let dc_s = if ps < gs { -1.0 } else { 0.0 };
        let dc_e = if pe > ge { 1.0 } else { 0.0 };
        let f = |dc: f64| d / (c * c) - 2.0 * d * d * dc / (c * c * c);
        (f(dc_s), f(dc_e))
    } else {
        (0.0, 0.0)
    };
    (value, -diou_s + dpen_s, -diou_e + dpen_e)
}

/// Distance-IoU regression loss summed over positive anchors.
///
/// `offsets` is `[n x 2]` holding `(s, e)` per anchor; returns the loss and
/// its `[n x 2]` gradient.
pub fn diou_loss(offsets: &Tensor, anchors: &[AnchorPoint], gt: &Interval, positive: &[bool]) -> (f64, Tensor) {
    assert_eq!(offsets.cols(), 2);
    assert_eq!(offsets.rows(), anchors.len());
    assert_eq!(offsets.rows(), positive.len());
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(offsets.rows(), 2);
    for (i, anchor) in anchors.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        let (s, e) = (offsets.get(i, 0), offsets.get(i, 1));
        let t = anchor.timestamp();
        let stride = anchor.stride();
        let pred = Interval { start: t - s * stride, end: t + e * stride };
        let (v, g_start, g_end) = diou_term_with_grad(&pred, gt);
        loss += v;
        grad.set(i, 0, -stride * g_start);
        grad.set(i, 1, stride * g_end);
    }
    (loss, grad)
}

/// Queries and shot embeddings of one mini-batch plus the positive pairs.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `[m x D]` sentence embeddings.
    pub queries: Tensor,
    /// `[n x D]` shot embeddings.
    pub shots: Tensor,
    /// `(query_index, shot_index)`.
    pub positives: BTreeSet<(usize, usize)>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_queries: Tensor,
    pub grad_shots: Tensor,
}

/// Symmetric multi-positive InfoNCE on a precomputed `[m x n]` similarity
/// matrix. Returns the loss and `dL/dsim`.
pub fn infonce_from_similarities(sim: &Tensor, positives: &BTreeSet<(usize, usize)>, tau: f64) -> (f64, Tensor) {
    assert!(tau > 0.0, "temperature must be positive");
    let (m, n) = sim.shape();
    let mut is_pos = vec![false; m * n];
    for &(i, s) in positives {
        assert!(i < m && s < n, "positive pair ({i}, {s}) out of range");
        is_pos[i * n + s] = true;
    }
    let mut grad = Tensor::zeros(m, n);
    let mut loss = 0.0;

    // One direction: rows are anchors, `cell(r, c)` maps to the matrix.
    let mut direction = |rows: usize, cols: usize, cell: &dyn Fn(usize, usize) -> usize| {
        let anchored: Vec<usize> = (0..rows).filter(|&r| (0..cols).any(|c| is_pos[cell(r, c)])).collect();
        if anchored.is_empty() {
            return;
        }
        let weight = 1.0 / anchored.len() as f64;
        for r in anchored {
            let logits: Vec<f64> = (0..cols).map(|c| sim.data()[cell(r, c)] / tau).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let all: f64 = exps.iter().sum();
            let pos: f64 = (0..cols).filter(|&c| is_pos[cell(r, c)]).map(|c| exps[c]).sum();
            loss += weight * (all.ln() - pos.ln());
            for c in 0..cols {
                let mut g = exps[c] / all;
                if is_pos[cell(r, c)] {
                    g -= exps[c] / pos;
                }
                grad.data_mut()[cell(r, c)] += weight * g / tau;
            }
        }
    };
    direction(m, n, &|i, s| i * n + s);
    direction(n, m, &|s, i| i * n + s);
    if positives.is_empty() {
        log::warn!("contrastive batch has no positive pairs; loss is zero");
    }
    (loss, grad)
}

fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms.push(norm);
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    (out, norms)
}

/// Backpropagates through row normalization.
fn normalize_rows_backward(unit: &Tensor, norms: &[f64], g_unit: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let (u, gu) = (unit.row(r), g_unit.row(r));
        let dot: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
        for (o, (&ui, &gi)) in g.row_mut(r).iter_mut().zip(u.iter().zip(gu)) {
            *o = (gi - ui * dot) / norms[r];
        }
    }
    g
}

/// Cosine similarity matrix `[m x n]` between two row sets.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Tensor {
    let (ua, _) = normalize_rows(a);
    let (ub, _) = normalize_rows(b);
    ua.matmul(&ub.transpose())
}

/// InfoNCE over cosine similarities with gradients w.r.t. both embedding sets.
pub fn infonce(batch: &ContrastiveBatch) -> InfoNceOutput {
    assert_eq!(batch.queries.cols(), batch.shots.cols());
    let (uq, nq) = normalize_rows(&batch.queries);
    let (us, ns) = normalize_rows(&batch.shots);
    let sim = uq.matmul(&us.transpose());
    let (loss, g_sim) = infonce_from_similarities(&sim, &batch.positives, batch.tau);
    let g_uq = g_sim.matmul(&us);
    let g_us = g_sim.transpose().matmul(&uq);
    InfoNceOutput {
        loss,
        grad_queries: normalize_rows_backward(&uq, &nq, &g_uq),
        grad_shots: normalize_rows_backward(&us, &ns, &g_us),
    }
}

/// Running estimate `C` of the positive-candidate count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossNormalizer {
    pub value: Option<f64>,
    pub momentum: f64,
}

impl LossNormalizer {
    pub fn new(momentum: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        Self { value: None, momentum }
    }

    pub fn with_value(value: f64, momentum: f64) -> Self {
        Self { value: Some(value), ..Self::new(momentum) }
    }

    /// Folds in this step's count; the first update takes the count as is.
    pub fn update(&mut self, num_positives: usize) -> f64 {
        let n = num_positives.max(1) as f64;
        let next = match self.value {
            Some(c) => self.momentum * c + (1.0 - self.momentum) * n,
            None => n,
        };
        self.value = Some(next);
        next
    }
}

/// `(L_ML + λ·L_con) / C` after updating `C` with this step's positives.
/// Returns the total and the divisor used.
pub fn total_loss(
    localization: f64,
    contrastive: f64,
    normalizer: &mut LossNormalizer,
    lambda: f64,
    num_positives: usize,
) -> (f64, f64) {
    assert!(lambda >= 0.0);
    let c = normalizer.update(num_positives);
    ((localization + lambda * contrastive) / c, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e).unwrap()
    }

    #[test]
    fn standard_ranges() {
        let r = LevelRanges::standard(6);
        assert_eq!(r.get(0), (0.0, 4.0));
        assert_eq!(r.get(1), (4.0, 8.0));
        assert_eq!(r.get(3), (16.0, 32.0));
        assert_eq!(r.get(6), (128.0, f64::INFINITY));
        assert_eq!(LevelRanges::standard(0).get(0), (0.0, f64::INFINITY));
    }

    #[test]
    fn assignment_examples() {
        let layout = PyramidLayout::new(32, 3).unwrap();
        let wide = LevelRanges(vec![(0.0, f64::INFINITY); 4]);
        let a = assign_positives(&layout, &iv(4.0, 12.0), 100.0, &wide);
        // level 0 anchor t=5 sits at flat index 5
        assert!(a.positive[5]);
        assert_eq!(a.targets[5], Some((1.0, 7.0)));
        let b = assign_positives(&layout, &iv(4.0, 12.0), 100.0, &LevelRanges::standard(3));
        assert!(!b.positive[20]);
        // level 3 anchor k=1 (t=8): reach 4 is outside (16, ∞)
        let idx = layout.level_offset(3) + 1;
        assert_eq!(b.anchors[idx], AnchorPoint::new(3, 1));
        assert!(!b.positive[idx]);
        let z = assign_positives(&layout, &iv(3.0, 3.0), 1.5, &wide);
        assert!(z.degenerate_gt && z.num_positives() == 0);
    }

    #[test]
    fn padded_anchors_never_positive() {
        let layout = PyramidLayout::new(10, 2).unwrap();
        let a = assign_positives(&layout, &iv(6.0, 10.0), 100.0, &LevelRanges(vec![(0.0, f64::INFINITY); 3]));
        for (i, &p) in a.positive.iter().enumerate() {
            assert!(!p || a.valid[i]);
        }
    }

    #[test]
    fn focal_examples() {
        let (l, _) = focal_loss(&[0.5], &[true], 0.25, 2.0, &[true]);
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.04333).abs() < 1e-5);
        let (l, _) = focal_loss(&[1.0 - 1e-9], &[true], 0.25, 2.0, &[true]);
        assert!(l < 1e-15);
        let (l, g) = focal_loss(&[0.3], &[false], 0.25, 2.0, &[false]);
        assert_eq!((l, g[0]), (0.0, 0.0));
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
            let y: Vec<bool> = (0..20).map(|_| rng.random_bool(0.3)).collect();
            let (l, _) = focal_loss(&p, &y, 0.5, 0.0, &[true; 20]);
            let bce: f64 = p.iter().zip(&y).map(|(&p, &y)| if y { -p.ln() } else { -(1.0 - p).ln() }).sum();
            assert!((l - 0.5 * bce).abs() < 1e-12);
        }
    }

    #[test]
    fn diou_examples() {
        let anchors = [AnchorPoint::new(0, 1)];
        // s=1, e=1 around t=1 decodes to [0,2]
        let off = Tensor::from_vec(1, 2, vec![1.0, 1.0]);
        let (l, _) = diou_loss(&off, &anchors, &iv(1.0, 3.0), &[true]);
        assert!((l - 7.0 / 9.0).abs() < 1e-15);
        let (l, _) = diou_loss(&off, &anchors, &iv(0.0, 2.0), &[true]);
        assert_eq!(l, 0.0);
        let (l, g) = diou_loss(&off, &anchors, &iv(1.0, 3.0), &[false]);
        assert_eq!(l, 0.0);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn infonce_examples() {
        let one = ContrastiveBatch {
            queries: Tensor::from_vec(1, 2, vec![1.0, 0.0]),
            shots: Tensor::from_vec(1, 2, vec![0.3, 0.7]),
            positives: [(0, 0)].into_iter().collect(),
            tau: 0.07,
        };
        assert!(infonce(&one).loss.abs() < 1e-12);

        let n = 5;
        let sim = Tensor::full(1, n, 0.4);
        let pos: BTreeSet<_> = [(0, 2)].into_iter().collect();
        let (l, _) = infonce_from_similarities(&sim, &pos, 0.1);
        // query direction: log n; shot direction: a single query, -log 1 = 0
        assert!((l - (n as f64).ln()).abs() < 1e-12);

        let (l, g) = infonce_from_similarities(&sim, &BTreeSet::new(), 0.1);
        assert_eq!(l, 0.0);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn normalizer_arithmetic() {
        let mut c = LossNormalizer::with_value(10.0, 0.9);
        let (total, div) = total_loss(22.0, 4.0, &mut c, 0.5, 20);
        assert!((div - 11.0).abs() < 1e-12);
        assert!((total - 24.0 / 11.0).abs() < 1e-12);

        let mut c = LossNormalizer::with_value(37.0, 0.0);
        assert_eq!(c.update(5), 5.0);
        assert_eq!(c.update(0), 1.0);

        let mut c = LossNormalizer::new(0.9);
        let (total, div) = total_loss(3.0, 100.0, &mut c, 0.0, 0);
        assert_eq!((total, div), (3.0, 1.0));
    }

    fn sim_and_pairs() -> impl Strategy<Value = (Tensor, BTreeSet<(usize, usize)>)> {
        (1usize..5, 1usize..6).prop_flat_map(|(m, n)| {
            (
                proptest::collection::vec(-1.0..1.0f64, m * n),
                proptest::collection::btree_set((0..m, 0..n), 0..(m * n)),
            )
                .prop_map(move |(d, p)| (Tensor::from_vec(m, n, d), p))
        })
    }

    proptest! {
        #[test]
        fn infonce_nonnegative((sim, pairs) in sim_and_pairs(), tau in 0.01..2.0f64) {
            let (l, _) = infonce_from_similarities(&sim, &pairs, tau);
            prop_assert!(l >= -1e-12);
        }

        #[test]
        fn infonce_temperature_rescaling((sim, pairs) in sim_and_pairs(), tau in 0.01..2.0f64, e in -3i32..4) {
            let k = 2f64.powi(e);
            let (a, _) = infonce_from_similarities(&sim.map(|x| k * x), &pairs, tau);
            let (b, _) = infonce_from_similarities(&sim, &pairs, tau / k);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn infonce_temperature_rescaling_general((sim, pairs) in sim_and_pairs(), tau in 0.05..2.0f64, k in 0.1..10.0f64) {
            let (a, _) = infonce_from_similarities(&sim.map(|x| k * x), &pairs, tau);
            let (b, _) = infonce_from_similarities(&sim, &pairs, tau / k);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn diou_term_bounded(s in 0.0..20.0f64, l in 0.0..20.0f64, gs in 0.0..20.0f64, gl in 0.01..20.0f64) {
            let (v, _, _) = diou_term_with_grad(&iv(s, s + l), &iv(gs, gs + gl));
            prop_assert!((0.0..2.0).contains(&v));
        }
    }
}
