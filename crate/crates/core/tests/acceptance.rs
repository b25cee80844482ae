//! Acceptance suite. Runs each criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any fail.
//!
//! Arguments `c1` .. `c9` restrict the run to those criteria; any other
//! non-flag argument (a unit-test name filter) skips the suite.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use egoground::app::trainer::{generate_splits, prepare_all};
use egoground::app::{synth, Checkpoint, RunConfig, Trainer};
use egoground::dataio::{generate_episode, GeneratorConfig, Narration, SignalMode, World};
use egoground::encoders::{ObjectEncoder, TextEncoder};
use egoground::fusion::{BiMamba, Gate, Multiscale};
use egoground::geometry::{AnchorPoint, Interval, PyramidLayout};
use egoground::infer_eval::{rank_at_m, soft_nms, ScoredMoment};
use egoground::losses::{
    assign_positives, diou_loss, focal_loss, infonce, infonce_from_similarities, total_loss, ContrastiveBatch,
    LevelRanges, LossConfig, LossNormalizer,
};
use egoground::model::{main_loss, prepare, InputDims, Model, ModelConfig, Paths, PrepareConfig};
use egoground::nn::gradcheck;
use egoground::nn::layers::Builder;
use egoground::nn::{Graph, ParamStore, Tensor};
use egoground::objects::{ObjectBank, ObjectConfig};
use egoground::shots::{segment_shots, ShotMode, ShotSet};

type Outcome = Result<String, String>;
type Invariant = fn(&mut ChaCha8Rng) -> Result<(), String>;

struct Criterion {
    id: &'static str,
    title: &'static str,
    run: fn() -> Outcome,
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { id: "c1", title: "gradient correctness", run: gradients },
        Criterion { id: "c2", title: "SoftNMS oracle", run: soft_nms_oracle },
        Criterion { id: "c3", title: "metric oracle", run: metric_oracle },
        Criterion { id: "c4", title: "assignment oracle", run: assignment_oracle },
        Criterion { id: "c5", title: "invariant suite", run: invariants },
        Criterion { id: "c6", title: "synthetic overfit", run: overfit },
        Criterion { id: "c7", title: "object-ablation direction", run: object_ablation },
        Criterion { id: "c8", title: "shot-branch direction", run: shot_branch },
        Criterion { id: "c9", title: "determinism", run: determinism },
    ];
    let selected: Vec<&Criterion> = if args.is_empty() {
        criteria.iter().collect()
    } else {
        criteria.iter().filter(|c| args.iter().any(|a| a == c.id)).collect()
    };
    if selected.is_empty() {
        return;
    }
    let mut failed = 0;
    for c in selected {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {}: {detail} [{secs:.1} s]", c.id, c.title),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {}: {detail} [{secs:.1} s]", c.id, c.title);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

// ---------------------------------------------------------------- c1

const H: f64 = 1e-5;

fn rel(a: f64, b: f64) -> f64 {
    gradcheck::rel_err(a, b, 1e-8)
}

/// Worst relative error between `grad` and central differences of `f`.
fn numeric_check(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut work = x.to_vec();
    for i in 0..x.len() {
        work[i] = x[i] + H;
        let up = f(&work);
        work[i] = x[i] - H;
        let down = f(&work);
        work[i] = x[i];
        worst = worst.max(rel(grad[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut focal, mut diou, mut nce) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(2..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
        let gamma = [0.0, 1.0, 2.0, 2.5][rng.random_range(0..4)];
        let (_, g) = focal_loss(&p, &targets, 0.25, gamma, &valid);
        focal = focal.max(numeric_check(&p, &g, |x| focal_loss(x, &targets, 0.25, gamma, &valid).0));

        let anchors: Vec<AnchorPoint> = (0..n).map(|i| AnchorPoint::new(rng.random_range(0..3), i)).collect();
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let start = rng.random_range(0.0..20.0);
        let gt = Interval { start, end: start + rng.random_range(1.0..15.0) };
        let offsets: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.1..6.0)).collect();
        let eval = |x: &[f64]| diou_loss(&Tensor::from_vec(n, 2, x.to_vec()), &anchors, &gt, &positive).0;
        let (_, g) = diou_loss(&Tensor::from_vec(n, 2, offsets.clone()), &anchors, &gt, &positive);
        diou = diou.max(numeric_check(&offsets, g.data(), eval));

        let (m, k, d) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(2..8));
        let q = random_tensor(&mut rng, m, d);
        let s = random_tensor(&mut rng, k, d);
        let mut positives = BTreeSet::new();
        for i in 0..m {
            positives.insert((i, rng.random_range(0..k)));
        }
        let tau = rng.random_range(0.05..1.0);
        let batch = |q: &Tensor, s: &Tensor| ContrastiveBatch { queries: q.clone(), shots: s.clone(), positives: positives.clone(), tau };
        let out = infonce(&batch(&q, &s));
        let wq = numeric_check(q.data(), out.grad_queries.data(), |x| infonce(&batch(&Tensor::from_vec(m, d, x.to_vec()), &s)).loss);
        let ws = numeric_check(s.data(), out.grad_shots.data(), |x| infonce(&batch(&q, &Tensor::from_vec(k, d, x.to_vec()))).loss);
        nce = nce.max(wq).max(ws);
    }

    let gen = GeneratorConfig {
        t: 8,
        d_v: 8,
        d_t: 8,
        d_o: 8,
        num_categories: 4,
        query_len_min: 4,
        query_len_max: 4,
        signal_mode: SignalMode::Mixed,
        ..GeneratorConfig::default()
    };
    let rec = generate_episode(&gen, &World::new(&gen), 11, "grad".into()).map_err(|e| e.to_string())?;
    let prep_cfg =
        PrepareConfig { pyramid_levels: 2, objects: ObjectConfig { n_o: 2, ..Default::default() }, ..Default::default() };
    let prep = prepare(&rec, &prep_cfg).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig {
        dim: 8,
        heads: 2,
        text_layers: 1,
        object_layers: 1,
        fusion_layers: 2,
        pyramid_levels: 2,
        ssm_state: 2,
        ffn_mult: 2,
        ..ModelConfig::default()
    };
    let (model, store) = Model::new(&model_cfg, InputDims { d_v: 8, d_t: 8, d_o: 8 }, 2, 3).map_err(|e| e.to_string())?;
    let loss_cfg = LossConfig::default();
    let ids: Vec<_> = store.ids().collect();
    let report = gradcheck::check(
        &store,
        &ids,
        |g| {
            let out = model.forward(g, &prep, Paths { objects: true, shots: false });
            main_loss(g, &out.pyramid, &prep, &loss_cfg).var
        },
        H,
        8,
        1e-6,
    );
    let detail = format!(
        "focal {focal:.1e}, diou {diou:.1e}, infonce {nce:.1e} (< 1e-5); end-to-end {:.1e} over {} entries (< 1e-3)",
        report.max_rel_err, report.checked
    );
    check(focal < 1e-5 && diou < 1e-5 && nce < 1e-5 && report.max_rel_err < 1e-3, detail)
}

// ---------------------------------------------------------------- c2

fn oracle_iou(a: &Interval, b: &Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Literal Gaussian SoftNMS: pick the best, emit, decay the rest, drop
/// those under the floor, repeat.
fn soft_nms_reference(moments: &[ScoredMoment], sigma: f64, floor: f64, max_keep: usize) -> Vec<ScoredMoment> {
    let mut scores: Vec<f64> = moments.iter().map(|m| m.score).collect();
    let mut alive = vec![true; moments.len()];
    let mut out = Vec::new();
    while out.len() < max_keep {
        let mut best: Option<usize> = None;
        for i in 0..moments.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = scores[i] > scores[b]
                        || (scores[i] == scores[b]
                            && (moments[i].source.level, moments[i].source.index) < (moments[b].source.level, moments[b].source.index));
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(ScoredMoment { score: scores[b], ..moments[b] });
        for j in 0..moments.len() {
            if alive[j] {
                let o = oracle_iou(&moments[b].interval, &moments[j].interval);
                scores[j] *= (-(o * o) / sigma).exp();
                if scores[j] < floor {
                    alive[j] = false;
                }
            }
        }
    }
    out
}

fn random_moments(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredMoment> {
    let mut out: Vec<ScoredMoment> = Vec::with_capacity(n);
    for i in 0..n {
        let interval = if i > 0 && rng.random_bool(0.15) {
            out[rng.random_range(0..i)].interval
        } else {
            let start = rng.random_range(0.0..60.0);
            Interval { start, end: start + rng.random_range(0.1..20.0) }
        };
        out.push(ScoredMoment { interval, score: rng.random_range(0.001..1.0), source: AnchorPoint::new(rng.random_range(0..4), i) });
    }
    out
}

fn soft_nms_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut emitted = 0;
    for case in 0..500 {
        let n = rng.random_range(0..=50);
        let moments = random_moments(&mut rng, n);
        let sigma = rng.random_range(0.1..1.5);
        let floor = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..0.3) };
        let max_keep = rng.random_range(1..=60);
        let got = soft_nms(&moments, sigma, floor, max_keep);
        let want = soft_nms_reference(&moments, sigma, floor, max_keep);
        if got.len() != want.len() {
            return Err(format!("case {case}: {} moments kept, reference keeps {}", got.len(), want.len()));
        }
        for (k, (a, b)) in got.iter().zip(&want).enumerate() {
            if a.interval != b.interval || a.source != b.source {
                return Err(format!("case {case}: rank {k} differs from reference"));
            }
            worst = worst.max((a.score - b.score).abs());
        }
        if got.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(format!("case {case}: output not sorted by score"));
        }
        emitted += got.len();
    }
    check(worst <= 1e-9, format!("500 instances, {emitted} moments emitted, max score difference {worst:.1e}"))
}

// ---------------------------------------------------------------- c3

fn grid_interval(rng: &mut ChaCha8Rng) -> Interval {
    let start = rng.random_range(0..80) as f64 * 0.5;
    Interval { start, end: start + rng.random_range(1..30) as f64 * 0.5 }
}

fn brute_force_rank(preds: &[Vec<ScoredMoment>], gts: &[Interval], m: usize, n: f64) -> f64 {
    let mut hits = 0usize;
    for (list, gt) in preds.iter().zip(gts) {
        let mut hit = false;
        for (rank, p) in list.iter().enumerate() {
            if rank < m && oracle_iou(&p.interval, gt) > n {
                hit = true;
            }
        }
        if hit {
            hits += 1;
        }
    }
    100.0 * hits as f64 / preds.len() as f64
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut compared = 0;
    for case in 0..200 {
        let q = rng.random_range(1..40);
        let mut gts = Vec::with_capacity(q);
        let mut preds = Vec::with_capacity(q);
        for _ in 0..q {
            let gt = grid_interval(&mut rng);
            let k = rng.random_range(0..10);
            let mut list: Vec<ScoredMoment> = (0..k)
                .map(|i| {
                    let interval = if rng.random_bool(0.3) {
                        // near the gt, on the half-clip grid so IoU can hit 0.3 and 0.5 exactly
                        let ds = rng.random_range(-4i32..=4) as f64 * 0.5;
                        let de = rng.random_range(-4i32..=4) as f64 * 0.5;
                        let start = (gt.start + ds).max(0.0);
                        Interval { start, end: (gt.end + de).max(start + 0.5) }
                    } else {
                        grid_interval(&mut rng)
                    };
                    ScoredMoment { interval, score: rng.random_range(0.0..1.0), source: AnchorPoint::new(0, i) }
                })
                .collect();
            list.sort_by(|a, b| b.score.total_cmp(&a.score));
            gts.push(gt);
            preds.push(list);
        }
        for m in [1, 5] {
            for n in [0.3, 0.5] {
                let got = rank_at_m(&preds, &gts, m, n).map_err(|e| e.to_string())?;
                let want = brute_force_rank(&preds, &gts, m, n);
                if got != want {
                    return Err(format!("case {case}, R@{m},{n}: {got} vs brute force {want}"));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("200 sets, {compared} (m, n) comparisons exact"))
}

// ---------------------------------------------------------------- c4

/// Enumerates every anchor of a pyramid over `valid` clips with `levels`
/// downsamplings and applies the two positivity conditions literally.
fn assignment_reference(valid: usize, levels: usize, gt: &Interval, radius: f64, ranges: &[(f64, f64)]) -> Vec<Option<(f64, f64)>> {
    let unit = 1usize << levels;
    let padded = valid.div_ceil(unit) * unit;
    let center = (gt.start + gt.end) / 2.0;
    let mut out = Vec::new();
    for j in 0..=levels {
        let stride = (1usize << j) as f64;
        let real = valid.div_ceil(1 << j);
        for k in 0..padded >> j {
            let t = k as f64 * stride;
            let lo = gt.start.max(center - radius * stride);
            let hi = gt.end.min(center + radius * stride);
            let in_window = k < real && lo < t && t < hi;
            let (s, e) = ((t - gt.start) / stride, (gt.end - t) / stride);
            let reach = s.max(e) * stride;
            let in_range = reach > ranges[j].0 && reach <= ranges[j].1;
            out.push((in_window && in_range).then_some((s, e)));
        }
    }
    out
}

fn assignment_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut positives = 0;
    for case in 0..100 {
        let levels = rng.random_range(0..=6);
        let valid = rng.random_range(1..=128);
        let t = valid as f64;
        let gt = if rng.random_bool(0.5) {
            let start = rng.random_range(0..valid) as f64;
            Interval { start, end: rng.random_range(start as usize + 1..=valid) as f64 }
        } else {
            let start = rng.random_range(0.0..t * 0.95);
            Interval { start, end: rng.random_range(start + 0.01..=t) }
        };
        let radius = if rng.random_bool(0.5) { 1.5 } else { rng.random_range(0.25..4.0) };
        let ranges = if rng.random_bool(0.5) {
            LevelRanges::standard(levels)
        } else {
            let mut edges = vec![0.0];
            for _ in 0..levels {
                let last = *edges.last().unwrap();
                edges.push(last + rng.random_range(0.5..12.0));
            }
            edges.push(f64::INFINITY);
            LevelRanges(edges.windows(2).map(|w| (w[0], w[1])).collect())
        };
        let layout = PyramidLayout::new(valid, levels).map_err(|e| e.to_string())?;
        let got = assign_positives(&layout, &gt, radius, &ranges);
        let want = assignment_reference(valid, levels, &gt, radius, &ranges.0);
        if got.targets != want || got.positive != want.iter().map(Option::is_some).collect::<Vec<_>>() {
            return Err(format!("case {case}: valid {valid}, levels {levels}, gt {gt:?}, radius {radius}"));
        }
        positives += got.num_positives();
    }
    check(positives > 0, format!("100 instances agree exactly ({positives} positive anchors)"))
}

// ---------------------------------------------------------------- c5

fn reversed(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        out.row_mut(r).copy_from_slice(t.row(t.rows() - 1 - r));
    }
    out
}

fn gate_hull(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for trial in 0..100 {
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(trial);
        let gate = Gate::new(&mut Builder::new(&mut store, &mut init), 8);
        store.get_mut(gate.mlp.fc2.b).data_mut().fill(rng.random_range(-20.0..20.0));
        let mut g = Graph::new(&store);
        let q = g.constant(random_tensor(rng, 5, 8).map(|x| 3.0 * x));
        let o = g.constant(random_tensor(rng, 5, 8).map(|x| 3.0 * x));
        let (out, a) = gate.forward(&mut g, q, o);
        for i in 0..40 {
            let (x, y, z) = (g.value(q).data()[i], g.value(o).data()[i], g.value(out).data()[i]);
            let av = g.value(a).data()[i];
            if z < x.min(y) - 1e-12 || z > x.max(y) + 1e-12 || !(0.0..=1.0).contains(&av) {
                return Err(format!("gate output {z} outside [{x}, {y}]"));
            }
        }
    }
    Ok(())
}

fn bimamba_flip(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for trial in 0..20 {
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(trial);
        let bm = BiMamba::new(&mut Builder::new(&mut store, &mut init), "bm", 8, 4, true);
        let len = rng.random_range(1..20);
        let x = random_tensor(rng, len, 8);
        let run = |v: &Tensor| {
            let mut g = Graph::new(&store);
            let c = g.constant(v.clone());
            let y = bm.forward(&mut g, c);
            g.value(y).clone()
        };
        let diff = reversed(&run(&x)).max_abs_diff(&run(&reversed(&x)));
        if diff > 1e-12 {
            return Err(format!("tied BiMamba breaks flip equivariance by {diff:.1e}"));
        }
    }
    Ok(())
}

fn pyramid_masks(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..20 {
        let levels = rng.random_range(0..=5);
        let valid = rng.random_range(1..=70);
        let layout = PyramidLayout::new(valid, levels).map_err(|e| e.to_string())?;
        for j in 0..levels {
            if layout.level_len(j + 1) * 2 != layout.level_len(j)
                || layout.level_valid_len(j + 1) != layout.level_valid_len(j).div_ceil(2)
            {
                return Err(format!("level {j} of {valid}/{levels} does not halve"));
            }
        }
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(valid as u64);
        let ms = Multiscale::new(&mut Builder::new(&mut store, &mut init), 8, 2, 16, levels);
        let mut g = Graph::new(&store);
        let x = g.constant(random_tensor(rng, valid, 8));
        let x = g.pad_rows(x, layout.padded_len);
        let feats = ms.forward(&mut g, x, &layout);
        for (j, &f) in feats.iter().enumerate() {
            if g.shape(f).0 != layout.level_len(j) {
                return Err(format!("level {j} has {} rows", g.shape(f).0));
            }
            for (k, keep) in layout.level_mask(j).into_iter().enumerate() {
                if !keep && g.value(f).row(k).iter().any(|&v| v != 0.0) {
                    return Err(format!("padded row {k} of level {j} is nonzero"));
                }
            }
        }
    }
    Ok(())
}

fn object_slots(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(5);
    let mut b = Builder::new(&mut store, &mut init);
    let text = TextEncoder::new(&mut b, 6, 8, 1, 2, 16, true);
    let enc = ObjectEncoder::new(&mut b, 5, 8, 2, 2, 16);
    let tokens = random_tensor(rng, 4, 6);
    let encode = |bank: &ObjectBank| {
        let mut g = Graph::new(&store);
        let x = g.constant(tokens.clone());
        let q = text.forward(&mut g, x, vec![true; 4]);
        let f = enc.forward(&mut g, bank, &q);
        g.value(f.features).clone()
    };
    for _ in 0..20 {
        let (clips, slots) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut bank = ObjectBank::empty(clips, slots, 5);
        for r in 0..clips * slots {
            if rng.random_bool(0.6) {
                bank.mask[r] = true;
                bank.features.row_mut(r).copy_from_slice(random_tensor(rng, 1, 5).data());
            }
        }
        let filled: Vec<usize> = (0..clips * slots).filter(|&r| bank.mask[r]).collect();
        if filled.is_empty() {
            continue;
        }
        let before = encode(&bank);
        let target = filled[rng.random_range(0..filled.len())];
        let mut changed = bank.clone();
        changed.features.row_mut(target).iter_mut().for_each(|x| *x += 1.0);
        let after = encode(&changed);
        for r in 0..clips * slots {
            let same = before.row(r) == after.row(r);
            if (r == target) == same {
                return Err(format!("changing slot {target} affected slot {r} unexpectedly"));
            }
            if !bank.mask[r] && after.row(r).iter().any(|&v| v != 0.0) {
                return Err(format!("empty slot {r} is nonzero"));
            }
        }
    }
    Ok(())
}

fn shot_tiling(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let texts = ["#C C turns around", "#C C walks", "#C C jumps", "#C C picks up the cup", "#C C LOOKS AROUND"];
    for _ in 0..200 {
        let t = rng.random_range(1.0..100.0);
        let narrations: Vec<Narration> = (0..rng.random_range(0..12))
            .map(|_| Narration { time: rng.random_range(-5.0..t + 5.0), text: texts[rng.random_range(0..texts.len())].into() })
            .collect();
        let mode = ShotMode::ALL[rng.random_range(0..4)];
        let sets = [
            segment_shots(&narrations, t, mode, rng.random_range(0.5..20.0)),
            ShotSet::from_cuts(narrations.iter().map(|n| n.time), t),
        ];
        for set in sets {
            let b = &set.boundaries;
            let ok = b.first() == Some(&0.0) && b.last() == Some(&t) && b.windows(2).all(|w| w[0] < w[1]);
            let shots = set.shots();
            let contiguous = shots.windows(2).all(|w| w[0].end == w[1].start);
            if !ok || !contiguous || shots.len() != set.len() {
                return Err(format!("shots {b:?} do not tile [0, {t}]"));
            }
        }
    }
    Ok(())
}

fn infonce_properties(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..300 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..7));
        let sim = random_tensor(rng, m, n);
        let pairs: BTreeSet<(usize, usize)> =
            (0..rng.random_range(0..m * n + 1)).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();
        let tau = rng.random_range(0.02..2.0);
        let (l, _) = infonce_from_similarities(&sim, &pairs, tau);
        if l < -1e-12 {
            return Err(format!("negative InfoNCE {l}"));
        }
        let k = rng.random_range(0.1..10.0);
        let (a, _) = infonce_from_similarities(&sim.map(|x| k * x), &pairs, tau);
        let (b, _) = infonce_from_similarities(&sim, &pairs, tau / k);
        if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
            return Err(format!("temperature rescaling: {a} vs {b}"));
        }
    }
    Ok(())
}

fn normalizer_arithmetic(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..50 {
        let momentum = rng.random_range(0.0..0.99);
        let mut c = LossNormalizer::new(momentum);
        let mut expect: Option<f64> = None;
        for _ in 0..20 {
            let n = rng.random_range(0..40usize);
            let (main, con, lambda) = (rng.random_range(0.0..50.0), rng.random_range(0.0..10.0), rng.random_range(0.0..2.0));
            let count = n.max(1) as f64;
            let next = match expect {
                None => count,
                Some(e) => momentum * e + (1.0 - momentum) * count,
            };
            expect = Some(next);
            let (total, div) = total_loss(main, con, &mut c, lambda, n);
            if (div - next).abs() > 1e-12 * next || div <= 0.0 || (total - (main + lambda * con) / next).abs() > 1e-12 * total.abs().max(1.0) {
                return Err(format!("C {div} vs {next}"));
            }
        }
    }
    Ok(())
}

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let checks: [(&str, Invariant); 7] = [
        ("gate convex hull", gate_hull),
        ("BiMamba flip equivariance", bimamba_flip),
        ("pyramid halving and masks", pyramid_masks),
        ("object slot independence", object_slots),
        ("shot tiling", shot_tiling),
        ("InfoNCE nonnegativity and rescaling", infonce_properties),
        ("C_ema arithmetic", normalizer_arithmetic),
    ];
    let mut failed = Vec::new();
    for (name, f) in checks {
        if let Err(e) = f(&mut rng) {
            failed.push(format!("{name}: {e}"));
        }
    }
    if failed.is_empty() {
        Ok(format!("{} invariant families hold", checks.len()))
    } else {
        Err(failed.join("; "))
    }
}

// ---------------------------------------------------------------- training criteria

/// Desk-scale model settings shared by the training criteria.
const DESK: &str = r#"
phase = "finetune"

[model]
dim = 64
ffn_mult = 2

[data]
t = 64
snr = 1.0
"#;

fn config(seed: u64, overrides: &[&str]) -> RunConfig {
    let mut over: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    over.push(format!("seed={seed}"));
    RunConfig::from_toml_str(DESK, &over).expect("acceptance config is valid")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/")
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let cfg = config(
        1,
        &[
            "data.signal_mode=\"video\"",
            "dataset.train_size=200",
            "dataset.val_size=1",
            "dataset.pretrain_size=1",
            "optim.total_epochs=15",
            "optim.warmup_epochs=4",
        ],
    );
    let splits = generate_splits(&cfg).map_err(|e| e.to_string())?;
    let train = prepare_all(&splits.train, &cfg).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg.clone(), None).map_err(|e| e.to_string())?;
    let mut best = 0.0f64;
    for epoch in 1..=cfg.optim.total_epochs.min(50) {
        trainer.train_epoch(&train);
        if epoch >= 6 {
            let r = trainer.evaluate(&train).map_err(|e| e.to_string())?.metrics["R@1,0.5"];
            best = best.max(r);
            if r >= 90.0 {
                let secs = start.elapsed().as_secs_f64();
                return check(secs <= 900.0, format!("train R@1,0.5 = {r:.1} after {epoch} epochs, {secs:.0} s (needs >= 90 within 15 min)"));
            }
        }
    }
    Err(format!("best train R@1,0.5 = {best:.1} after {} epochs (needs >= 90)", cfg.optim.total_epochs))
}

fn object_ablation() -> Outcome {
    let base = [
        "data.signal_mode=\"object_only\"",
        "dataset.train_size=300",
        "dataset.val_size=100",
        "dataset.pretrain_size=1",
        "optim.total_epochs=8",
        "optim.warmup_epochs=2",
        "ablation.use_shot_branch=false",
    ];
    let splits = generate_splits(&config(1, &base)).map_err(|e| e.to_string())?;
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for seed in 1..=3 {
        for use_objects in [true, false] {
            let mut over = base.to_vec();
            let flag = format!("ablation.use_objects={use_objects}");
            over.push(&flag);
            let cfg = config(seed, &over);
            let train = prepare_all(&splits.train, &cfg).map_err(|e| e.to_string())?;
            let val = prepare_all(&splits.val, &cfg).map_err(|e| e.to_string())?;
            let mut trainer = Trainer::new(cfg.clone(), None).map_err(|e| e.to_string())?;
            for _ in 0..cfg.optim.total_epochs {
                trainer.train_epoch(&train);
            }
            let r = trainer.evaluate(&val).map_err(|e| e.to_string())?.metrics["R@1,0.3"];
            if use_objects { on.push(r) } else { off.push(r) }
        }
    }
    let (m_on, m_off) = (median(on.clone()), median(off.clone()));
    check(
        m_on - m_off >= 20.0,
        format!(
            "val R@1,0.3 median {m_on:.1} with objects ({}) vs {m_off:.1} without ({}), gap {:.1} (needs >= 20)",
            fmt_list(&on),
            fmt_list(&off),
            m_on - m_off
        ),
    )
}

fn shot_branch() -> Outcome {
    let base = [
        "data.signal_mode=\"video\"",
        "dataset.train_size=200",
        "dataset.val_size=100",
        "dataset.pretrain_size=1",
        "optim.total_epochs=10",
        "optim.warmup_epochs=4",
        "ablation.use_objects=false",
    ];
    let splits = generate_splits(&config(1, &base)).map_err(|e| e.to_string())?;
    let (mut on, mut off, mut margins) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 1..=3 {
        for use_shots in [true, false] {
            let mut over = base.to_vec();
            let flag = format!("ablation.use_shot_branch={use_shots}");
            over.push(&flag);
            let cfg = config(seed, &over);
            let train = prepare_all(&splits.train, &cfg).map_err(|e| e.to_string())?;
            let val = prepare_all(&splits.val, &cfg).map_err(|e| e.to_string())?;
            let mut trainer = Trainer::new(cfg.clone(), None).map_err(|e| e.to_string())?;
            for _ in 0..cfg.optim.total_epochs {
                trainer.train_epoch(&train);
            }
            let r = trainer.evaluate(&val).map_err(|e| e.to_string())?.metrics["R@1,0.3"];
            if use_shots {
                margins.push(trainer.shot_alignment(&val).margin());
                on.push(r);
            } else {
                off.push(r);
            }
        }
    }
    let margin = median(margins.clone());
    let (m_on, m_off) = (median(on.clone()), median(off.clone()));
    let superior = if m_on > m_off { "above" } else if m_on == m_off { "equal to" } else { "below" };
    check(
        margin > 0.1 && m_on >= m_off,
        format!(
            "held-out pos-neg cosine margin median {margin:.3} ({}) (needs > 0.1); val R@1,0.3 median {m_on:.1} with shots ({}) vs {m_off:.1} without ({}), {superior} (needs >=)",
            margins.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/"),
            fmt_list(&on),
            fmt_list(&off)
        ),
    )
}

// ---------------------------------------------------------------- c9

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = r#"
seed = 5
phase = "finetune"

[model]
dim = 16
heads = 2
text_layers = 1
object_layers = 1
fusion_layers = 2
pyramid_levels = 3
ssm_state = 2
ffn_mult = 2

[data]
t = 24
d_v = 16
d_t = 8
d_o = 8
num_categories = 4
signal_mode = "mixed"

[dataset]
pretrain_size = 6
train_size = 16
val_size = 6

[optim]
batch_size = 4
total_epochs = 3
warmup_epochs = 1

[objects]
n_o = 2

[shots]
shot_seconds = 3.0
"#;

fn determinism() -> Outcome {
    let cfg = RunConfig::from_toml_str(SMALL, &[]).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&cfg, &a).map_err(|e| e.to_string())?;
    synth(&cfg, &b).map_err(|e| e.to_string())?;
    let (fa, fb) = (files(&a), files(&b));
    if fa != fb || fa.is_empty() {
        return Err("dataset bytes differ between identical seeds".into());
    }
    let bytes: usize = fa.iter().map(|(_, d)| d.len()).sum();

    let splits = generate_splits(&cfg).map_err(|e| e.to_string())?;
    let train = prepare_all(&splits.train, &cfg).map_err(|e| e.to_string())?;
    let run = || {
        let mut t = Trainer::new(cfg.clone(), None).unwrap();
        let steps: Vec<f64> = (0..cfg.optim.total_epochs).flat_map(|_| t.train_epoch(&train)).map(|s| s.loss).collect();
        (t, steps)
    };
    let (trainer, first) = run();
    let (_, second) = run();
    let worst = first.iter().zip(&second).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if first.len() != second.len() || worst > 1e-6 {
        return Err(format!("step losses differ by {worst:.1e}"));
    }

    let ck = trainer.checkpoint();
    let (c1, c2) = (tmp.path().join("ck1"), tmp.path().join("ck2"));
    ck.save(&c1).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&c1).map_err(|e| e.to_string())?;
    back.save(&c2).map_err(|e| e.to_string())?;
    let bits = |s: &ParamStore| s.iter().flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    if back != ck || bits(&back.store) != bits(&ck.store) || files(&c1) != files(&c2) {
        return Err("checkpoint does not round-trip bit-exactly".into());
    }
    Ok(format!(
        "{} dataset files ({bytes} bytes) identical; {} step losses within {worst:.1e}; checkpoint round-trips bit-exactly",
        fa.len(),
        first.len()
    ))
}
