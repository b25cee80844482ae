//! Parameterized building blocks. Each block owns only `ParamId`s; the
//! arrays live in the shared `ParamStore`.

use std::sync::Arc;

use rand::Rng;

use super::graph::{AttnLayout, Graph, Var};
use super::params::{init, ParamId, ParamStore};
use super::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, R>) -> T) -> T {
        let prefix = format!("{}{}.", self.prefix, name);
        let mut inner = Builder { store: self.store, rng: self.rng, prefix };
        f(&mut inner)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(format!("{}{}", self.prefix, name), value)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        b.scoped(name, |b| {
            let w = init::xavier(b.rng, fan_in, fan_out);
            Linear { w: b.add("w", w), b: b.add("b", Tensor::zeros(1, fan_out)) }
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| LayerNorm {
            gain: b.add("gain", Tensor::full(1, dim, 1.0)),
            bias: b.add("bias", Tensor::zeros(1, dim)),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with input/output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        b.scoped(name, |b| Attention {
            q: Linear::new(b, "q", dim, dim),
            k: Linear::new(b, "k", dim, dim),
            v: Linear::new(b, "v", dim, dim),
            o: Linear::new(b, "o", dim, dim),
            heads,
        })
    }

    /// Rows of `query` attend over rows of `kv` under `layout`. Query rows
    /// with no visible key contribute exactly zero.
    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var, layout: Arc<AttnLayout>) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let has_keys = layout.has_keys();
        let a = g.attention(q, k, v, self.heads, layout);
        let o = self.o.forward(g, a);
        if has_keys.iter().all(|&h| h) {
            o
        } else {
            g.mask_rows(o, Arc::new(has_keys))
        }
    }
}

/// Two-layer feedforward with GELU.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim_in: usize, hidden: usize, dim_out: usize) -> Self {
        b.scoped(name, |b| Mlp { fc1: Linear::new(b, "fc1", dim_in, hidden), fc2: Linear::new(b, "fc2", hidden, dim_out) })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm residual feedforward: `x + MLP(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, hidden: usize) -> Self {
        b.scoped(name, |b| FeedForward { norm: LayerNorm::new(b, "norm", dim), mlp: Mlp::new(b, "mlp", dim, hidden, dim) })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}

/// Pre-norm residual attention: `x + Attn(LN(x), kv)`.
#[derive(Debug, Clone, Copy)]
pub struct AttnBlock {
    pub norm: LayerNorm,
    pub attn: Attention,
}

impl AttnBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        b.scoped(name, |b| AttnBlock { norm: LayerNorm::new(b, "norm", dim), attn: Attention::new(b, "attn", dim, heads) })
    }

    /// Cross-attention when `kv` is given, self-attention over the
    /// normalized input otherwise.
    pub fn forward(&self, g: &mut Graph, x: Var, kv: Option<Var>, layout: Arc<AttnLayout>) -> Var {
        let h = self.norm.forward(g, x);
        let kv = kv.unwrap_or(h);
        let a = self.attn.forward(g, h, kv, layout);
        g.add(x, a)
    }
}

/// Sinusoidal positional table `[len x dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            t.set(pos, 2 * i, (pos as f64 * freq).sin());
            t.set(pos, 2 * i + 1, (pos as f64 * freq).cos());
        }
    }
    t
}
