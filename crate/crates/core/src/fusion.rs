//! Main branch: bidirectional selective-scan mixing, query and object
//! cross-attention, gated fusion, the multi-scale pyramid and task heads.

use std::sync::Arc;

use rand::Rng;

use crate::encoders::{ObjectFeatures, QueryFeatures};
use crate::geometry::PyramidLayout;
use crate::nn::layers::{AttnBlock, Builder, FeedForward, LayerNorm, Linear, Mlp};
use crate::nn::params::init;
use crate::nn::{AttnLayout, Graph, ParamId, Tensor, Var};

/// Input-dependent parameters of one scan direction.
#[derive(Debug, Clone, Copy)]
pub struct ScanParams {
    pub delta: Linear,
    pub w_b: ParamId,
    pub w_c: ParamId,
    /// `A = -exp(a_log)`, `[D x N]`.
    pub a_log: ParamId,
}

impl ScanParams {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, state: usize) -> Self {
        b.scoped(name, |b| {
            let mut w = init::xavier(b.rng, dim, dim);
            w.scale_in_place(0.1);
            // softplus(bias) spread log-uniformly over [1e-3, 1e-1]
            let bias: Vec<f64> = (0..dim)
                .map(|_| {
                    let dt = (b.rng.random_range((1e-3f64).ln()..(1e-1f64).ln())).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect();
            let delta = Linear { w: b.add("delta.w", w), b: b.add("delta.b", Tensor::from_vec(1, dim, bias)) };
            let wb = init::xavier(b.rng, dim, state);
            let w_b = b.add("b.w", wb);
            let wc = init::xavier(b.rng, dim, state);
            let w_c = b.add("c.w", wc);
            let a = (0..dim).flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln())).collect();
            let a_log = b.add("a_log", Tensor::from_vec(dim, state, a));
            ScanParams { delta, w_b, w_c, a_log }
        })
    }

    fn scan(&self, g: &mut Graph, u: Var) -> Var {
        let d = self.delta.forward(g, u);
        let delta = g.softplus(d);
        let wb = g.param(self.w_b);
        let wc = g.param(self.w_c);
        let b = g.matmul(u, wb);
        let c = g.matmul(u, wc);
        let al = g.param(self.a_log);
        let a = g.neg_exp(al);
        g.selective_scan(u, delta, a, b, c)
    }
}

/// Forward and backward selective scans, averaged, gated by the input and
/// projected.
#[derive(Debug, Clone, Copy)]
pub struct BiMamba {
    pub norm: LayerNorm,
    pub fwd: ScanParams,
    /// `None` when both directions share `fwd`.
    pub bwd: Option<ScanParams>,
    pub gate: Linear,
    pub out: Linear,
}

impl BiMamba {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, state: usize, tie_directions: bool) -> Self {
        b.scoped(name, |b| BiMamba {
            norm: LayerNorm::new(b, "norm", dim),
            fwd: ScanParams::new(b, "fwd", dim, state),
            bwd: (!tie_directions).then(|| ScanParams::new(b, "bwd", dim, state)),
            gate: Linear::new(b, "gate", dim, dim),
            out: Linear::new(b, "out", dim, dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, v: Var) -> Var {
        let u = self.norm.forward(g, v);
        let yf = self.fwd.scan(g, u);
        let ur = g.reverse_rows(u);
        let yb = self.bwd.as_ref().unwrap_or(&self.fwd).scan(g, ur);
        let yb = g.reverse_rows(yb);
        let sum = g.add(yf, yb);
        let y = g.scale(sum, 0.5);
        let gl = self.gate.forward(g, u);
        let gate = g.sigmoid(gl);
        let y = g.mul(y, gate);
        self.out.forward(g, y)
    }
}

/// `V̂ = V + MLP(BiMamba(V))`.
#[derive(Debug, Clone, Copy)]
pub struct MixBlock {
    pub bimamba: BiMamba,
    pub mlp: Mlp,
}

impl MixBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, hidden: usize, state: usize, tie: bool) -> Self {
        b.scoped("mix", |b| MixBlock { bimamba: BiMamba::new(b, "bimamba", dim, state, tie), mlp: Mlp::new(b, "mlp", dim, hidden, dim) })
    }

    pub fn forward(&self, g: &mut Graph, v: Var) -> Var {
        let m = self.bimamba.forward(g, v);
        let m = self.mlp.forward(g, m);
        g.add(v, m)
    }
}

/// Cross-attention to an external key/value set followed by a feedforward.
#[derive(Debug, Clone, Copy)]
pub struct CrossBlock {
    pub attn: AttnBlock,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        b.scoped(name, |b| CrossBlock { attn: AttnBlock::new(b, "attn", dim, heads), ffn: FeedForward::new(b, "ffn", dim, hidden) })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, kv: Var, layout: Arc<AttnLayout>) -> Var {
        let h = self.attn.forward(g, x, Some(kv), layout);
        self.ffn.forward(g, h)
    }
}

/// `V̂_Q`: every clip attends over the query tokens.
pub fn fuse_query(block: &CrossBlock, g: &mut Graph, v: Var, query: &QueryFeatures) -> Var {
    let (t, _) = g.shape(v);
    let (l, _) = g.shape(query.tokens);
    let layout = Arc::new(AttnLayout::dense(t, l, query.key_valid()));
    block.forward(g, v, query.tokens, layout)
}

/// `V̂_O`: clip `t` attends over its own filled object slots only.
pub fn fuse_object(block: &CrossBlock, g: &mut Graph, v: Var, objects: &ObjectFeatures) -> Var {
    let (t, _) = g.shape(v);
    let n = objects.slots;
    assert_eq!(objects.mask.len(), t * n, "object slots must match the clip count");
    let layout = Arc::new(AttnLayout { ranges: (0..t).map(|i| (i * n, (i + 1) * n)).collect(), key_valid: Some(objects.mask.to_vec()) });
    block.forward(g, v, objects.features, layout)
}

/// Elementwise sigmoid gate over the two streams.
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub mlp: Mlp,
}

impl Gate {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize) -> Self {
        b.scoped("gate", |b| Gate { mlp: Mlp::new(b, "mlp", 2 * dim, dim, dim) })
    }

    /// Returns `(A·V̂_Q + (1 − A)·V̂_O, A)`.
    pub fn forward(&self, g: &mut Graph, vq: Var, vo: Var) -> (Var, Var) {
        let cat = g.concat_cols(vq, vo);
        let logits = self.mlp.forward(g, cat);
        let a = g.sigmoid(logits);
        (g.gate_mix(a, vq, vo), a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionLayer {
    pub mix: MixBlock,
    pub query: CrossBlock,
    pub object: CrossBlock,
    pub gate: Gate,
}

impl FusionLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, heads: usize, hidden: usize, state: usize, tie: bool) -> Self {
        FusionLayer {
            mix: MixBlock::new(b, dim, hidden, state, tie),
            query: CrossBlock::new(b, "query", dim, heads, hidden),
            object: CrossBlock::new(b, "object", dim, heads, hidden),
            gate: Gate::new(b, dim),
        }
    }

    /// One fusion layer. Without objects the gate is bypassed and the
    /// output is `V̂_Q`.
    pub fn forward(&self, g: &mut Graph, v: Var, query: &QueryFeatures, objects: Option<&ObjectFeatures>) -> Var {
        let vh = self.mix.forward(g, v);
        let vq = fuse_query(&self.query, g, vh, query);
        match objects {
            Some(o) => {
                let vo = fuse_object(&self.object, g, vh, o);
                self.gate.forward(g, vq, vo).0
            }
            None => vq,
        }
    }
}

/// One downsampling stage: depthwise stride-2 convolution, then a pre-norm
/// self-attention and feedforward.
#[derive(Debug, Clone, Copy)]
pub struct PyramidStage {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub attn: AttnBlock,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Multiscale {
    pub stages: Vec<PyramidStage>,
}

impl Multiscale {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, heads: usize, hidden: usize, levels: usize) -> Self {
        b.scoped("pyramid", |b| Multiscale {
            stages: (0..levels)
                .map(|j| {
                    b.scoped(&j.to_string(), |b| {
                        let k: Vec<f64> = (0..dim).flat_map(|_| [0.25, 0.5, 0.25]).collect();
                        let w = Tensor::from_vec(dim, 3, k).transpose();
                        PyramidStage {
                            conv_w: b.add("conv.w", w),
                            conv_b: b.add("conv.b", Tensor::zeros(1, dim)),
                            attn: AttnBlock::new(b, "attn", dim, heads),
                            ffn: FeedForward::new(b, "ffn", dim, hidden),
                        }
                    })
                })
                .collect(),
        })
    }

    /// `x0` is the padded level-0 sequence (pad rows zero).
    pub fn forward(&self, g: &mut Graph, x0: Var, layout: &PyramidLayout) -> Vec<Var> {
        assert_eq!(self.stages.len(), layout.levels);
        assert_eq!(g.shape(x0).0, layout.padded_len);
        let mut levels = vec![x0];
        let mut x = x0;
        for (j, stage) in self.stages.iter().enumerate() {
            let mask = Arc::new(layout.level_mask(j + 1));
            let w = g.param(stage.conv_w);
            let b = g.param(stage.conv_b);
            x = g.depthwise_stride2(x, w, b);
            x = g.mask_rows(x, mask.clone());
            let n = mask.len();
            let attn = Arc::new(AttnLayout::dense(n, n, Some(mask.to_vec())));
            x = stage.attn.forward(g, x, None, attn);
            x = stage.ffn.forward(g, x);
            x = g.mask_rows(x, mask);
            levels.push(x);
        }
        levels
    }
}

/// Same-padded 1-D convolution with kernel 3 over a whole level.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv1d {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim_in: usize, dim_out: usize, bias: f64) -> Self {
        b.scoped(name, |b| {
            let w = init::xavier(b.rng, 3 * dim_in, dim_out);
            Conv1d { w: b.add("w", w), b: b.add("b", Tensor::full(1, dim_out, bias)) }
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let rows = g.shape(x).0;
        let cols = g.shape(x).1;
        let stacked = g.shift_stack(x, 3, rows);
        let w = g.param(self.w);
        debug_assert_eq!(g.shape(w).0, 3 * cols);
        let y = g.matmul(stacked, w);
        let b = g.param(self.b);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadPair {
    pub cls: (Conv1d, Conv1d),
    pub reg: (Conv1d, Conv1d),
}

/// Classification and regression heads, shared across levels or per level.
#[derive(Debug, Clone)]
pub struct Heads {
    pub per_level: Vec<HeadPair>,
}

/// Prior probability the classification bias starts at.
const CLS_PRIOR: f64 = 0.01;

impl Heads {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, levels: usize, shared: bool) -> Self {
        let prior = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        let make = |b: &mut Builder<'_, R>| HeadPair {
            cls: (Conv1d::new(b, "cls.0", dim, dim, 0.0), Conv1d::new(b, "cls.1", dim, 1, prior)),
            reg: (Conv1d::new(b, "reg.0", dim, dim, 0.0), Conv1d::new(b, "reg.1", dim, 2, 0.0)),
        };
        b.scoped("heads", |b| {
            let per_level = if shared {
                vec![make(b); levels]
            } else {
                (0..levels).map(|j| b.scoped(&j.to_string(), make)).collect()
            };
            Heads { per_level }
        })
    }

    pub fn forward(&self, g: &mut Graph, levels: &[Var], layout: &PyramidLayout) -> PyramidOutputs {
        assert_eq!(levels.len(), self.per_level.len());
        let mut cls = Vec::with_capacity(levels.len());
        let mut reg = Vec::with_capacity(levels.len());
        for (j, (&x, head)) in levels.iter().zip(&self.per_level).enumerate() {
            let mask = Arc::new(layout.level_mask(j));
            let h = head.cls.0.forward(g, x);
            let h = g.gelu(h);
            let h = g.mask_rows(h, mask.clone());
            let c = head.cls.1.forward(g, h);
            cls.push(g.sigmoid(c));
            let h = head.reg.0.forward(g, x);
            let h = g.gelu(h);
            let h = g.mask_rows(h, mask);
            let r = head.reg.1.forward(g, h);
            reg.push(g.softplus(r));
        }
        PyramidOutputs { cls: g.concat_rows(&cls), reg: g.concat_rows(&reg), layout: *layout, levels: levels.to_vec() }
    }
}

/// Per-anchor confidences `[N x 1]` and offsets `[N x 2]`, anchors in
/// `layout.anchors()` order.
#[derive(Debug, Clone)]
pub struct PyramidOutputs {
    pub cls: Var,
    pub reg: Var,
    pub layout: PyramidLayout,
    pub levels: Vec<Var>,
}
