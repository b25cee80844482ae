//! Synthetic feature generator.
//!
//! A fixed "world" (drawn from `world_seed`) holds one event direction and
//! per-category vectors in the video, text and object spaces. Each episode
//! picks a target category, writes its noun token into the query and plants
//! the category's signal inside the ground-truth span.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EpisodeMeta, EpisodeRecord, Matrix32, Narration};
use crate::error::{Error, Result};
use crate::geometry::{Interval, DEFAULT_FPS, DEFAULT_WINDOW_FRAMES};
use crate::objects::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    Video,
    ObjectOnly,
    Mixed,
}

impl SignalMode {
    fn video(self) -> bool {
        matches!(self, SignalMode::Video | SignalMode::Mixed)
    }

    fn objects(self) -> bool {
        matches!(self, SignalMode::ObjectOnly | SignalMode::Mixed)
    }
}

impl std::str::FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(SignalMode::Video),
            "object_only" => Ok(SignalMode::ObjectOnly),
            "mixed" => Ok(SignalMode::Mixed),
            _ => Err(Error::config("data.signal_mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub t: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_o: usize,
    pub query_len_min: usize,
    pub query_len_max: usize,
    pub num_categories: usize,
    pub num_filler_words: usize,
    pub signal_mode: SignalMode,
    pub snr: f64,
    /// Amplitude of the planted video signal at `snr = 1`.
    pub signal_gain: f64,
    pub gt_min_frac: f64,
    pub gt_max_frac: f64,
    /// Probability of a second, non-target segment carrying another category.
    pub distractor_prob: f64,
    pub token_noise: f64,
    pub detection_hit_prob: f64,
    pub false_alarm_prob: f64,
    /// Per-clip probability of a low-confidence target detection.
    pub weak_detection_prob: f64,
    pub max_background_detections: usize,
    pub distractor_narrations: usize,
    pub boundary_movement_prob: f64,
    pub distractor_movement_prob: f64,
    pub fps: f64,
    pub window_frames: u32,
    pub world_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            t: 64,
            d_v: 64,
            d_t: 32,
            d_o: 32,
            query_len_min: 4,
            query_len_max: 12,
            num_categories: 16,
            num_filler_words: 24,
            signal_mode: SignalMode::Video,
            snr: 1.0,
            signal_gain: 2.5,
            gt_min_frac: 0.1,
            gt_max_frac: 0.4,
            distractor_prob: 0.5,
            token_noise: 0.1,
            detection_hit_prob: 0.9,
            false_alarm_prob: 0.03,
            weak_detection_prob: 0.3,
            max_background_detections: 2,
            distractor_narrations: 3,
            boundary_movement_prob: 0.9,
            distractor_movement_prob: 0.3,
            fps: DEFAULT_FPS,
            window_frames: DEFAULT_WINDOW_FRAMES,
            world_seed: 0x05_6e_e7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.t", self.t),
            ("data.d_v", self.d_v),
            ("data.d_t", self.d_t),
            ("data.d_o", self.d_o),
            ("data.query_len_min", self.query_len_min),
            ("data.num_filler_words", self.num_filler_words),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.query_len_max < self.query_len_min {
            return Err(Error::config("data.query_len_max", "must be at least query_len_min"));
        }
        if self.num_categories < 2 {
            return Err(Error::config("data.num_categories", "need at least two categories"));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::config("data.snr", "must be finite and nonnegative"));
        }
        if !(self.gt_min_frac > 0.0 && self.gt_min_frac <= self.gt_max_frac && self.gt_max_frac <= 1.0) {
            return Err(Error::config("data.gt_min_frac", "need 0 < gt_min_frac <= gt_max_frac <= 1"));
        }
        let probs = [
            ("data.distractor_prob", self.distractor_prob),
            ("data.detection_hit_prob", self.detection_hit_prob),
            ("data.false_alarm_prob", self.false_alarm_prob),
            ("data.weak_detection_prob", self.weak_detection_prob),
            ("data.boundary_movement_prob", self.boundary_movement_prob),
            ("data.distractor_movement_prob", self.distractor_movement_prob),
        ];
        for (field, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.fps > 0.0) || self.window_frames == 0 {
            return Err(Error::config("data.fps", "fps and window_frames must be positive"));
        }
        if !(self.token_noise >= 0.0 && self.signal_gain >= 0.0) {
            return Err(Error::config("data.token_noise", "noise and gain must be nonnegative"));
        }
        Ok(())
    }
}

/// Latent vectors shared by every episode generated from one world seed.
#[derive(Debug, Clone)]
pub struct World {
    pub event: Vec<f64>,
    pub video_category: Vec<Vec<f64>>,
    pub text_category: Vec<Vec<f64>>,
    pub object_category: Vec<Vec<f64>>,
    pub filler: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Random vectors, orthonormalized when there are no more than `dim` of them.
fn spread_units(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = unit(rng, dim);
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(v);
    }
    out
}

impl World {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let event = unit(&mut rng, cfg.d_v);
        let video_category = spread_units(&mut rng, cfg.num_categories, cfg.d_v);
        let text_category = (0..cfg.num_categories).map(|_| gaussian(&mut rng, cfg.d_t)).collect();
        let scale = (cfg.d_o as f64).sqrt();
        let object_category = spread_units(&mut rng, cfg.num_categories, cfg.d_o)
            .into_iter()
            .map(|v| v.into_iter().map(|x| x * scale).collect())
            .collect();
        let filler = (0..cfg.num_filler_words).map(|_| gaussian(&mut rng, cfg.d_t)).collect();
        Self { event, video_category, text_category, object_category, filler }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of episode `index` in a split, independent of generation order.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

const MOVEMENT_GROUPS: [(&[&str], f64); 3] = [
    (&["turns around", "looks around"], 0.6),
    (&["walks", "moves around"], 0.25),
    (&["rides", "runs", "cycles", "jogs", "jumps"], 0.15),
];

const ACTIONS: [&str; 6] = ["picks up the", "puts down the", "opens the", "washes the", "cuts the", "holds the"];
const NOUNS: [&str; 8] = ["cup", "knife", "drawer", "plate", "bread", "bowl", "door", "towel"];

fn narration_text(rng: &mut ChaCha8Rng, movement: bool) -> String {
    if movement {
        let mut u: f64 = rng.random();
        for (phrases, w) in MOVEMENT_GROUPS {
            if u < w {
                return format!("#C C {}", phrases[rng.random_range(0..phrases.len())]);
            }
            u -= w;
        }
        return "#C C turns around".to_string();
    }
    let action = ACTIONS[rng.random_range(0..ACTIONS.len())];
    let noun = NOUNS[rng.random_range(0..NOUNS.len())];
    format!("#C C {action} {noun}")
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> Matrix32 {
    let n = rows.len();
    Matrix32::new(n, cols, rows.into_iter().flatten().map(|x| x as f32).collect())
}

fn clip_inside(t: usize, span: &Interval) -> bool {
    let c = t as f64 + 0.5;
    c >= span.start && c <= span.end
}

fn sample_span(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Interval {
    let t = cfg.t as f64;
    let len = rng.random_range(cfg.gt_min_frac..=cfg.gt_max_frac) * t;
    let start = rng.random_range(0.0..=(t - len));
    Interval { start, end: start + len }
}

/// Generates one episode. Deterministic in `(cfg, world, seed)`.
pub fn generate_episode(cfg: &GeneratorConfig, world: &World, seed: u64, episode_id: String) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = cfg.t;
    let target = rng.random_range(0..cfg.num_categories);
    let gt = sample_span(&mut rng, cfg);

    // Optional distractor span carrying another category.
    let mut distractor = None;
    if rng.random_bool(cfg.distractor_prob) {
        let span = sample_span(&mut rng, cfg);
        let other = (target + rng.random_range(1..cfg.num_categories)) % cfg.num_categories;
        if span.overlap(&gt) == 0.0 {
            distractor = Some((span, other));
        }
    }

    let amp = cfg.snr * cfg.signal_gain;
    let mut clips: Vec<Vec<f64>> = (0..t_len).map(|_| gaussian(&mut rng, cfg.d_v)).collect();
    if cfg.signal_mode.video() && amp > 0.0 {
        for (t, row) in clips.iter_mut().enumerate() {
            if clip_inside(t, &gt) {
                for (d, x) in row.iter_mut().enumerate() {
                    *x += amp * (world.event[d] + world.video_category[target][d]);
                }
            } else if let Some((span, other)) = &distractor {
                if clip_inside(t, span) {
                    for (d, x) in row.iter_mut().enumerate() {
                        *x += amp * world.video_category[*other][d];
                    }
                }
            }
        }
    }

    let len = rng.random_range(cfg.query_len_min..=cfg.query_len_max);
    let noun_pos = rng.random_range(0..len);
    let tokens: Vec<Vec<f64>> = (0..len)
        .map(|i| {
            let base = if i == noun_pos {
                &world.text_category[target]
            } else {
                &world.filler[rng.random_range(0..cfg.num_filler_words)]
            };
            base.iter()
                .map(|&b| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    b + cfg.token_noise * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();

    let mut detections = Vec::new();
    let emb = |c: usize| world.object_category[c].iter().map(|&x| x as f32).collect::<Vec<f32>>();
    for t in 0..t_len {
        if cfg.signal_mode.objects() {
            let inside = clip_inside(t, &gt);
            let p = if inside { cfg.detection_hit_prob } else { cfg.false_alarm_prob };
            if rng.random_bool(p) {
                let conf = rng.random_range(0.7f32..1.0);
                detections.push(Detection { clip_index: t, category_id: target as u32, confidence: conf, embedding: emb(target) });
            }
            if rng.random_bool(cfg.weak_detection_prob) {
                let conf = rng.random_range(0.2f32..0.55);
                detections.push(Detection { clip_index: t, category_id: target as u32, confidence: conf, embedding: emb(target) });
            }
        }
        for _ in 0..rng.random_range(0..=cfg.max_background_detections) {
            let c = (target + rng.random_range(1..cfg.num_categories)) % cfg.num_categories;
            let conf = rng.random_range(0.0f32..1.0);
            detections.push(Detection { clip_index: t, category_id: c as u32, confidence: conf, embedding: emb(c) });
        }
    }

    let mut times: Vec<(f64, bool)> = Vec::new();
    for b in [gt.start, gt.end] {
        if b > 0.0 && b < t_len as f64 {
            times.push((b, true));
        }
    }
    for _ in 0..cfg.distractor_narrations {
        times.push((rng.random_range(0.0..t_len as f64), false));
    }
    times.sort_by(|a, b| a.0.total_cmp(&b.0));
    times.dedup_by(|b, a| a.0 == b.0);
    let narrations = times
        .into_iter()
        .map(|(time, boundary)| {
            let p = if boundary { cfg.boundary_movement_prob } else { cfg.distractor_movement_prob };
            let movement = rng.random_bool(p);
            Narration { time, text: narration_text(&mut rng, movement) }
        })
        .collect();

    let record = EpisodeRecord {
        episode_id,
        clip_features: matrix(clips, cfg.d_v),
        query_tokens: matrix(tokens, cfg.d_t),
        noun_embeddings: matrix(vec![world.object_category[target].clone()], cfg.d_o),
        detections,
        gt,
        narrations,
        meta: EpisodeMeta { fps: cfg.fps, window_frames: cfg.window_frames, signal_mode: cfg.signal_mode },
    };
    record.validate()?;
    Ok(record)
}

/// Generates `count` episodes named `{split}-{index:05}`.
pub fn generate_split(cfg: &GeneratorConfig, seed: u64, count: usize, split: &str) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    let world = World::new(cfg);
    (0..count)
        .map(|i| generate_episode(cfg, &world, episode_seed(seed, i as u64), format!("{split}-{i:05}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: SignalMode) -> GeneratorConfig {
        GeneratorConfig { signal_mode: mode, ..GeneratorConfig::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let c = cfg(SignalMode::Mixed);
        let w = World::new(&c);
        let a = generate_episode(&c, &w, 42, "e".into()).unwrap();
        let b = generate_episode(&c, &w, 42, "e".into()).unwrap();
        assert_eq!(a, b);
        let other = generate_episode(&c, &w, 43, "e".into()).unwrap();
        assert_ne!(a.clip_features, other.clip_features);
    }

    #[test]
    fn split_is_order_independent() {
        let c = cfg(SignalMode::Video);
        let all = generate_split(&c, 9, 5, "s").unwrap();
        let w = World::new(&c);
        let third = generate_episode(&c, &w, episode_seed(9, 3), "s-00003".into()).unwrap();
        assert_eq!(all[3], third);
        assert_eq!(all[0].episode_id, "s-00000");
    }

    #[test]
    fn records_satisfy_invariants() {
        for mode in [SignalMode::Video, SignalMode::ObjectOnly, SignalMode::Mixed] {
            for ep in generate_split(&cfg(mode), 1, 50, "x").unwrap() {
                ep.validate().unwrap();
                let len = ep.gt.length();
                assert!((0.1 * 64.0 - 1e-9..=0.4 * 64.0 + 1e-9).contains(&len));
                assert!((4..=12).contains(&ep.query_tokens.rows));
                assert_eq!(ep.noun_embeddings.rows, 1);
            }
        }
    }

    #[test]
    fn zero_snr_plants_nothing() {
        let c = GeneratorConfig { snr: 0.0, ..cfg(SignalMode::Video) };
        let loud = GeneratorConfig { snr: 1.0, ..c.clone() };
        let w = World::new(&c);
        let quiet = generate_episode(&c, &w, 5, "e".into()).unwrap();
        let planted = generate_episode(&loud, &w, 5, "e".into()).unwrap();
        // Same random stream; the difference is exactly the planted signal.
        for t in 0..c.t {
            let same = quiet.clip_features.row(t) == planted.clip_features.row(t);
            let marked = clip_inside(t, &quiet.gt)
                || quiet.clip_features.row(t) != planted.clip_features.row(t);
            assert!(same || marked);
            if clip_inside(t, &quiet.gt) {
                assert!(!same);
            }
        }
    }

    #[test]
    fn object_mode_puts_confident_targets_inside_gt() {
        let c = cfg(SignalMode::ObjectOnly);
        let eps = generate_split(&c, 3, 40, "o").unwrap();
        let (mut inside, mut outside, mut n_in, mut n_out) = (0usize, 0usize, 0usize, 0usize);
        for ep in &eps {
            let target_emb: Vec<f32> = ep.noun_embeddings.row(0).to_vec();
            for t in 0..ep.num_clips() {
                let hit = ep.detections.iter().any(|d| d.clip_index == t && d.confidence > 0.6 && d.embedding == target_emb);
                if clip_inside(t, &ep.gt) {
                    n_in += 1;
                    inside += hit as usize;
                } else {
                    n_out += 1;
                    outside += hit as usize;
                }
            }
        }
        assert!(inside as f64 / n_in as f64 > 0.8);
        assert!((outside as f64 / n_out as f64) < 0.1);
    }

    #[test]
    fn movement_narrations_at_boundaries() {
        let eps = generate_split(&cfg(SignalMode::Video), 4, 30, "n").unwrap();
        let with_boundary = eps
            .iter()
            .filter(|ep| ep.narrations.iter().any(|n| n.time == ep.gt.start || n.time == ep.gt.end))
            .count();
        assert_eq!(with_boundary, 30);
        for ep in &eps {
            for n in &ep.narrations {
                assert!(n.text.starts_with("#C C "));
            }
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let bad = GeneratorConfig { d_o: 0, ..GeneratorConfig::default() };
        match generate_split(&bad, 0, 1, "x") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "data.d_o"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = GeneratorConfig { query_len_max: 2, ..GeneratorConfig::default() };
        assert!(bad.validate().is_err());
    }
}
