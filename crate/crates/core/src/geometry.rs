//! Temporal geometry in clip-index units: intervals, anchor points and the
//! IoU / distance-IoU terms used by the losses and the evaluation metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per clip used by the default clip windowing.
pub const DEFAULT_WINDOW_FRAMES: u32 = 16;
/// Default video frame rate.
pub const DEFAULT_FPS: f64 = 30.0;

/// Seconds covered by one clip.
pub fn seconds_per_clip(window_frames: u32, fps: f64) -> f64 {
    window_frames as f64 / fps
}

/// A closed temporal span `[start, end]` in clip-index units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    /// Builds an interval, rejecting reversed or non-finite bounds.
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start > end {
            return Err(Error::InvalidInterval { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Length of the overlap with `other` (0 when disjoint or touching).
    pub fn overlap(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Interval {
        let start = self.start.clamp(lo, hi);
        let end = self.end.clamp(lo, hi).max(start);
        Interval { start, end }
    }

    pub fn to_seconds(&self, seconds_per_clip: f64) -> (f64, f64) {
        (self.start * seconds_per_clip, self.end * seconds_per_clip)
    }
}

/// Intersection over union of two intervals.
///
/// Two identical zero-length intervals score 1; a zero-length interval
/// against anything else scores 0.
pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.overlap(b);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a.start == b.start && a.end == b.end { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Returns `(iou, d²/c²)` where `d` is the distance between centers and `c`
/// the length of the smallest interval enclosing both.
pub fn diou_terms(pred: &Interval, gt: &Interval) -> (f64, f64) {
    let c = pred.end.max(gt.end) - pred.start.min(gt.start);
    if c <= 0.0 {
        return (iou(pred, gt), 0.0);
    }
    let d = pred.center() - gt.center();
    (iou(pred, gt), d * d / (c * c))
}

/// A position in the feature pyramid. Level `j` has stride `2^j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnchorPoint {
    pub level: usize,
    pub index: usize,
}

impl AnchorPoint {
    pub fn new(level: usize, index: usize) -> Self {
        Self { level, index }
    }

    pub fn stride(&self) -> f64 {
        (1u64 << self.level) as f64
    }

    pub fn timestamp(&self) -> f64 {
        self.stride() * self.index as f64
    }
}

/// Decodes nonnegative normalized offsets into an interval. No clamping.
pub fn decode_anchor(anchor: AnchorPoint, start_offset: f64, end_offset: f64) -> Interval {
    let t = anchor.timestamp();
    let stride = anchor.stride();
    Interval { start: t - start_offset * stride, end: t + end_offset * stride }
}

/// Anchor layout of a feature pyramid over a (right-padded) sequence.
///
/// The sequence is padded to a multiple of `2^levels`; level `j` then has
/// exactly `padded_len / 2^j` anchors, of which the first
/// `ceil(valid_len / 2^j)` are real.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidLayout {
    pub valid_len: usize,
    pub padded_len: usize,
    /// Number of downsampling layers; the pyramid has `levels + 1` levels.
    pub levels: usize,
}

impl PyramidLayout {
    pub fn new(valid_len: usize, levels: usize) -> Result<Self> {
        if valid_len == 0 {
            return Err(Error::config("data.t", "sequence length must be positive"));
        }
        let unit = 1usize << levels;
        Ok(Self { valid_len, padded_len: valid_len.div_ceil(unit) * unit, levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels + 1
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.padded_len >> level
    }

    pub fn level_valid_len(&self, level: usize) -> usize {
        self.valid_len.div_ceil(1 << level)
    }

    /// Offset of a level's first anchor in the flattened anchor order.
    pub fn level_offset(&self, level: usize) -> usize {
        (0..level).map(|j| self.level_len(j)).sum()
    }

    pub fn num_anchors(&self) -> usize {
        self.level_offset(self.num_levels())
    }

    /// All anchors, level by level, with their validity flag.
    pub fn anchors(&self) -> Vec<(AnchorPoint, bool)> {
        let mut out = Vec::with_capacity(self.num_anchors());
        for j in 0..self.num_levels() {
            let valid = self.level_valid_len(j);
            out.extend((0..self.level_len(j)).map(|k| (AnchorPoint::new(j, k), k < valid)));
        }
        out
    }

    /// Validity mask for one level.
    pub fn level_mask(&self, level: usize) -> Vec<bool> {
        let valid = self.level_valid_len(level);
        (0..self.level_len(level)).map(|k| k < valid).collect()
    }
}
