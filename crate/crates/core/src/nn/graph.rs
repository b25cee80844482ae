//! Reverse-mode autodiff over 2-D `f64` tensors.
//!
//! A `Graph` records one forward pass as a tape of nodes. Parameters are
//! read straight from a borrowed `ParamStore`; `backward` returns the
//! accumulated gradient of every parameter that was used.
//!
//! Ops are coarse where that pays off: multi-head attention and the
//! selective state-space scan carry hand-written backward passes instead of
//! being spelled out as hundreds of tiny nodes.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query row may attend to.
///
/// Query row `i` sees key rows `ranges[i].0 .. ranges[i].1`, minus any key
/// whose `key_valid` entry is false. A row with no visible key produces a
/// zero output.
#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub ranges: Vec<(usize, usize)>,
    pub key_valid: Option<Vec<bool>>,
}

impl AttnLayout {
    /// Every query sees every (valid) key.
    pub fn dense(n_queries: usize, n_keys: usize, key_valid: Option<Vec<bool>>) -> Self {
        Self { ranges: vec![(0, n_keys); n_queries], key_valid }
    }

    fn visible(&self, i: usize, j: usize) -> bool {
        self.key_valid.as_ref().is_none_or(|v| v[j]) && {
            let (s, e) = self.ranges[i];
            j >= s && j < e
        }
    }

    /// For each query row, whether at least one key is visible.
    pub fn has_keys(&self) -> Vec<bool> {
        self.ranges
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| (s..e).any(|j| self.visible(i, j)))
            .collect()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    GateMix { gate: Var, x: Var, y: Var },
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    NegExp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttnLayout>, probs: Vec<f64>, offsets: Vec<usize> },
    Scan { x: Var, delta: Var, a: Var, b: Var, c: Var, states: Vec<f64> },
    MaskRows(Var, Arc<Vec<bool>>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterRows(Var, Arc<Vec<usize>>),
    ReverseRows(Var),
    RepeatRows(Var),
    ShiftStack { x: Var, kernel: usize, group: usize },
    DepthwiseStride2 { x: Var, w: Var, b: Var },
    GroupMean(Var, usize),
    Sum(Var),
    /// Externally computed function with precomputed input gradients.
    Custom(Vec<(Var, Tensor)>),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(512), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Parameters referenced by this graph.
    pub fn used_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.param_vars.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Elementwise `gate * x + (1 - gate) * y`, rounded into the closed
    /// interval spanned by `x` and `y`.
    pub fn gate_mix(&mut self, gate: Var, x: Var, y: Var) -> Var {
        let (ta, tx, ty) = (self.value(gate), self.value(x), self.value(y));
        assert_eq!(ta.shape(), tx.shape());
        assert_eq!(tx.shape(), ty.shape());
        let data = ta
            .data()
            .iter()
            .zip(tx.data().iter().zip(ty.data()))
            .map(|(&a, (&xv, &yv))| (a * xv + (1.0 - a) * yv).clamp(xv.min(yv), xv.max(yv)))
            .collect();
        let out = Tensor::from_vec(tx.rows(), tx.cols(), data);
        self.push(out, Op::GateMix { gate, x, y })
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), (1, ta.cols()), "add_row expects a 1 x cols bias");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(out, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Elementwise `-exp(a)`.
    pub fn neg_exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x.exp());
        self.push(out, Op::NegExp(a))
    }

    /// Row-wise layer normalization with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        let (tg, tb) = (self.value(gain), self.value(bias));
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * tg.data()[c] + tb.data()[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Scaled dot-product multi-head attention on already-projected inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Arc<AttnLayout>) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.shape();
        assert_eq!(tk.cols(), d);
        assert_eq!(tv.shape(), tk.shape());
        assert_eq!(layout.ranges.len(), nq);
        assert!(heads > 0 && d % heads == 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(nq, d);
        let mut offsets = Vec::with_capacity(nq + 1);
        let mut probs = Vec::new();
        for i in 0..nq {
            offsets.push(probs.len());
            let (s, e) = layout.ranges[i];
            let span = e - s;
            let base = probs.len();
            probs.resize(base + span * heads, 0.0);
            for h in 0..heads {
                let qh = &tq.row(i)[h * dh..(h + 1) * dh];
                let p = &mut probs[base + h * span..base + (h + 1) * span];
                let mut max = f64::NEG_INFINITY;
                for (jj, j) in (s..e).enumerate() {
                    if layout.visible(i, j) {
                        let kh = &tk.row(j)[h * dh..(h + 1) * dh];
                        let sc = scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>();
                        p[jj] = sc;
                        max = max.max(sc);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for (jj, j) in (s..e).enumerate() {
                    if layout.visible(i, j) {
                        p[jj] = (p[jj] - max).exp();
                        z += p[jj];
                    } else {
                        p[jj] = 0.0;
                    }
                }
                let orow = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
                for (jj, j) in (s..e).enumerate() {
                    p[jj] /= z;
                    if p[jj] != 0.0 {
                        let vh = &tv.row(j)[h * dh..(h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vh) {
                            *o += p[jj] * x;
                        }
                    }
                }
            }
        }
        offsets.push(probs.len());
        self.push(out, Op::Attention { q, k, v, heads, layout, probs, offsets })
    }

    /// Selective state-space scan, one independent state vector per channel:
    /// `h_t = exp(delta_t * a) ∘ h_{t-1} + delta_t * b_t * x_t`, `y_t = <c_t, h_t>`.
    ///
    /// Shapes: `x, delta: [T x D]`, `a: [D x N]`, `b, c: [T x N]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Var {
        let (tx, td, ta, tb, tc) = (self.value(x), self.value(delta), self.value(a), self.value(b), self.value(c));
        let (t_len, d) = tx.shape();
        let n = ta.cols();
        assert_eq!(td.shape(), (t_len, d));
        assert_eq!(ta.rows(), d);
        assert_eq!(tb.shape(), (t_len, n));
        assert_eq!(tc.shape(), (t_len, n));
        let mut states = vec![0.0; t_len * d * n];
        let mut out = Tensor::zeros(t_len, d);
        let mut h = vec![0.0; d * n];
        for t in 0..t_len {
            let (xr, dr, br, cr) = (tx.row(t), td.row(t), tb.row(t), tc.row(t));
            for ch in 0..d {
                let ar = ta.row(ch);
                let hs = &mut h[ch * n..(ch + 1) * n];
                let mut y = 0.0;
                for s in 0..n {
                    hs[s] = (dr[ch] * ar[s]).exp() * hs[s] + dr[ch] * br[s] * xr[ch];
                    y += cr[s] * hs[s];
                }
                out.set(t, ch, y);
            }
            states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
        self.push(out, Op::Scan { x, delta, a, b, c, states })
    }

    /// Zeroes every row whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(mask.len(), out.rows());
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                out.row_mut(r).fill(0.0);
            }
        }
        self.push(out, Op::MaskRows(a, mask))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows(), tb.rows());
        let cols = ta.cols() + tb.cols();
        let mut out = Tensor::zeros(ta.rows(), cols);
        for r in 0..ta.rows() {
            out.row_mut(r)[..ta.cols()].copy_from_slice(ta.row(r));
            out.row_mut(r)[ta.cols()..].copy_from_slice(tb.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Places row `r` of `a` at row `idx[r]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n_rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(idx.len(), t.rows());
        let mut out = Tensor::zeros(n_rows, t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(out, Op::ScatterRows(a, idx))
    }

    /// Appends zero rows up to `n_rows`.
    pub fn pad_rows(&mut self, a: Var, n_rows: usize) -> Var {
        let rows = self.value(a).rows();
        assert!(n_rows >= rows);
        if n_rows == rows {
            return a;
        }
        self.scatter_rows(a, Arc::new((0..rows).collect()), n_rows)
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(t.row(t.rows() - 1 - r));
        }
        self.push(out, Op::ReverseRows(a))
    }

    /// Tiles `a` vertically `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len() * times);
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(t.rows() * times, t.cols(), data);
        self.push(out, Op::RepeatRows(a))
    }

    /// Stacks `kernel` shifted copies of each row side by side (im2col for a
    /// stride-1, same-padded 1-D convolution). Rows are processed in
    /// independent groups of `group` rows; shifts never cross a group edge.
    pub fn shift_stack(&mut self, x: Var, kernel: usize, group: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let t = self.value(x);
        let (rows, cols) = t.shape();
        assert!(group > 0 && rows % group == 0);
        let half = (kernel / 2) as isize;
        let mut out = Tensor::zeros(rows, cols * kernel);
        for r in 0..rows {
            let g0 = (r / group * group) as isize;
            for kk in 0..kernel {
                let src = r as isize + kk as isize - half;
                if src >= g0 && src < g0 + group as isize {
                    out.row_mut(r)[kk * cols..(kk + 1) * cols].copy_from_slice(t.row(src as usize));
                }
            }
        }
        self.push(out, Op::ShiftStack { x, kernel, group })
    }

    /// Depthwise 1-D convolution, stride 2, zero padding `k/2`.
    /// `w: [k x C]`, `b: [1 x C]`; output has `ceil(T/2)` rows.
    pub fn depthwise_stride2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (rows, cols) = tx.shape();
        let k = tw.rows();
        let half = (k / 2) as isize;
        let out_rows = rows.div_ceil(2);
        let mut out = Tensor::zeros(out_rows, cols);
        for i in 0..out_rows {
            let orow = out.row_mut(i);
            orow.copy_from_slice(tb.data());
            for kk in 0..k {
                let src = 2 * i as isize + kk as isize - half;
                if src >= 0 && (src as usize) < rows {
                    for ((o, &xv), &wv) in orow.iter_mut().zip(tx.row(src as usize)).zip(tw.row(kk)) {
                        *o += wv * xv;
                    }
                }
            }
        }
        self.push(out, Op::DepthwiseStride2 { x, w, b })
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.shape();
        assert!(group > 0 && rows % group == 0);
        let mut out = Tensor::zeros(rows / group, cols);
        for r in 0..rows {
            for (o, x) in out.row_mut(r / group).iter_mut().zip(t.row(r)) {
                *o += x / group as f64;
            }
        }
        self.push(out, Op::GroupMean(a, group))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Records a value computed outside the graph together with its
    /// gradients w.r.t. `inputs`. The output must be a scalar.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.shape(*v), g.shape(), "custom op gradient shape mismatch");
        }
        self.push(Tensor::scalar(value), Op::Custom(inputs))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward from a non-scalar");
        self.backward_seeded(&[(output, Tensor::scalar(1.0))])
    }

    /// Backpropagates arbitrary upstream gradients seeded at several nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Grads {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, *v, g);
        }
        let mut out = Grads::new(self.params.len());
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Grads) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, &g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                gemm_acc(&g, false, tb, true, &mut ga);
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                gemm_acc(ta, true, &g, false, &mut gb);
                accumulate_owned(grads, *a, ga);
                accumulate_owned(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, &g);
                accumulate_owned(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, &g);
                accumulate_owned(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = elementwise(&g, self.value(*b), |g, y| g * y);
                let gb = elementwise(&g, self.value(*a), |g, x| g * x);
                accumulate_owned(grads, *a, ga);
                accumulate_owned(grads, *b, gb);
            }
            Op::GateMix { gate, x, y } => {
                let (ta, tx, ty) = (self.value(*gate), self.value(*x), self.value(*y));
                let gg = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(tx.data().iter().zip(ty.data())).map(|(&d, (&xv, &yv))| d * (xv - yv)).collect(),
                );
                let gx = elementwise(&g, ta, |d, a| d * a);
                let gy = elementwise(&g, ta, |d, a| d * (1.0 - a));
                accumulate_owned(grads, *gate, gg);
                accumulate_owned(grads, *x, gx);
                accumulate_owned(grads, *y, gy);
            }
            Op::AddRow(a, row) => {
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate_owned(grads, *row, gr);
                accumulate_owned(grads, *a, g);
            }
            Op::Scale(a, k) => accumulate_owned(grads, *a, g.map(|x| k * x)),
            Op::Sigmoid(a) => {
                let y = self.value(Var(i));
                accumulate_owned(grads, *a, elementwise(&g, y, |g, y| g * y * (1.0 - y)));
            }
            Op::Softplus(a) => {
                accumulate_owned(grads, *a, elementwise(&g, self.value(*a), |g, x| g * sigmoid(x)));
            }
            Op::Gelu(a) => {
                accumulate_owned(grads, *a, elementwise(&g, self.value(*a), |g, x| g * gelu_grad(x)));
            }
            Op::NegExp(a) => {
                let y = self.value(Var(i));
                accumulate_owned(grads, *a, elementwise(&g, y, |g, y| g * y));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let (rows, cols) = g.shape();
                let mut gx = Tensor::zeros(rows, cols);
                let mut gg = Tensor::zeros(1, cols);
                let mut gb = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * tg.data()[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        gg.data_mut()[c] += gr[c] * hr[c];
                        gb.data_mut()[c] += gr[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        let dh = gr[c] * tg.data()[c];
                        out[c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                accumulate_owned(grads, *x, gx);
                accumulate_owned(grads, *gain, gg);
                accumulate_owned(grads, *bias, gb);
            }
            Op::Attention { q, k, v, heads, layout, probs, offsets } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(tq.rows(), d);
                let mut gk = Tensor::zeros(tk.rows(), d);
                let mut gv = Tensor::zeros(tv.rows(), d);
                let mut dp = Vec::new();
                for qi in 0..tq.rows() {
                    let (s, e) = layout.ranges[qi];
                    let span = e - s;
                    let base = offsets[qi];
                    for h in 0..*heads {
                        let p = &probs[base + h * span..base + (h + 1) * span];
                        let go = &g.row(qi)[h * dh..(h + 1) * dh];
                        dp.clear();
                        dp.resize(span, 0.0);
                        let mut dot = 0.0;
                        for (jj, j) in (s..e).enumerate() {
                            if p[jj] == 0.0 {
                                continue;
                            }
                            let vh = &tv.row(j)[h * dh..(h + 1) * dh];
                            dp[jj] = go.iter().zip(vh).map(|(a, b)| a * b).sum();
                            dot += p[jj] * dp[jj];
                            for (o, x) in gv.row_mut(j)[h * dh..(h + 1) * dh].iter_mut().zip(go) {
                                *o += p[jj] * x;
                            }
                        }
                        for (jj, j) in (s..e).enumerate() {
                            if p[jj] == 0.0 {
                                continue;
                            }
                            let ds = p[jj] * (dp[jj] - dot) * scale;
                            let kh = &tk.row(j)[h * dh..(h + 1) * dh];
                            for (o, x) in gq.row_mut(qi)[h * dh..(h + 1) * dh].iter_mut().zip(kh) {
                                *o += ds * x;
                            }
                            let qh = &tq.row(qi)[h * dh..(h + 1) * dh];
                            for (o, x) in gk.row_mut(j)[h * dh..(h + 1) * dh].iter_mut().zip(qh) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                accumulate_owned(grads, *q, gq);
                accumulate_owned(grads, *k, gk);
                accumulate_owned(grads, *v, gv);
            }
            Op::Scan { x, delta, a, b, c, states } => {
                let (tx, td, ta, tb, tc) =
                    (self.value(*x), self.value(*delta), self.value(*a), self.value(*b), self.value(*c));
                let (t_len, d) = tx.shape();
                let n = ta.cols();
                let mut gx = Tensor::zeros(t_len, d);
                let mut gd = Tensor::zeros(t_len, d);
                let mut ga = Tensor::zeros(d, n);
                let mut gb = Tensor::zeros(t_len, n);
                let mut gc = Tensor::zeros(t_len, n);
                let mut dh = vec![0.0; d * n];
                for t in (0..t_len).rev() {
                    let (xr, dr, br, cr, gy) = (tx.row(t), td.row(t), tb.row(t), tc.row(t), g.row(t));
                    let h_t = &states[t * d * n..(t + 1) * d * n];
                    for ch in 0..d {
                        let ar = ta.row(ch);
                        for s in 0..n {
                            let idx = ch * n + s;
                            gc.data_mut()[t * n + s] += gy[ch] * h_t[idx];
                            dh[idx] += gy[ch] * cr[s];
                            let h_prev = if t > 0 { states[(t - 1) * d * n + idx] } else { 0.0 };
                            let decay = (dr[ch] * ar[s]).exp();
                            let g_decay = dh[idx] * h_prev * decay;
                            gd.data_mut()[t * d + ch] += g_decay * ar[s] + dh[idx] * br[s] * xr[ch];
                            ga.data_mut()[ch * n + s] += g_decay * dr[ch];
                            gb.data_mut()[t * n + s] += dh[idx] * dr[ch] * xr[ch];
                            gx.data_mut()[t * d + ch] += dh[idx] * dr[ch] * br[s];
                            dh[idx] *= decay;
                        }
                    }
                }
                accumulate_owned(grads, *x, gx);
                accumulate_owned(grads, *delta, gd);
                accumulate_owned(grads, *a, ga);
                accumulate_owned(grads, *b, gb);
                accumulate_owned(grads, *c, gc);
            }
            Op::MaskRows(a, mask) => {
                let mut ga = g;
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        ga.row_mut(r).fill(0.0);
                    }
                }
                accumulate_owned(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut ga = Tensor::zeros(g.rows(), ca);
                let mut gb = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate_owned(grads, *a, ga);
                accumulate_owned(grads, *b, gb);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = g.data()[start * cols..(start + rows) * cols].to_vec();
                    accumulate_owned(grads, p, Tensor::from_vec(rows, cols, slice));
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                let cols = ta.cols();
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate_owned(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate_owned(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let mut ga = Tensor::zeros(idx.len(), g.cols());
                for (r, &dst) in idx.iter().enumerate() {
                    ga.row_mut(r).copy_from_slice(g.row(dst));
                }
                accumulate_owned(grads, *a, ga);
            }
            Op::ReverseRows(a) => {
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(g.row(g.rows() - 1 - r));
                }
                accumulate_owned(grads, *a, ga);
            }
            Op::RepeatRows(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..g.rows() {
                    for (o, x) in ga.row_mut(r % ta.rows()).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate_owned(grads, *a, ga);
            }
            Op::ShiftStack { x, kernel, group } => {
                let tx = self.value(*x);
                let (rows, cols) = tx.shape();
                let half = (kernel / 2) as isize;
                let mut gx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let g0 = (r / group * group) as isize;
                    for kk in 0..*kernel {
                        let src = r as isize + kk as isize - half;
                        if src >= g0 && src < g0 + *group as isize {
                            let gr = &g.row(r)[kk * cols..(kk + 1) * cols];
                            for (o, v) in gx.row_mut(src as usize).iter_mut().zip(gr) {
                                *o += v;
                            }
                        }
                    }
                }
                accumulate_owned(grads, *x, gx);
            }
            Op::DepthwiseStride2 { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (rows, cols) = tx.shape();
                let k = tw.rows();
                let half = (k / 2) as isize;
                let mut gx = Tensor::zeros(rows, cols);
                let mut gw = Tensor::zeros(k, cols);
                let mut gb = Tensor::zeros(1, cols);
                for i in 0..g.rows() {
                    let gr = g.row(i);
                    for (o, v) in gb.data_mut().iter_mut().zip(gr) {
                        *o += v;
                    }
                    for kk in 0..k {
                        let src = 2 * i as isize + kk as isize - half;
                        if src >= 0 && (src as usize) < rows {
                            let src = src as usize;
                            for c in 0..cols {
                                gw.data_mut()[kk * cols + c] += gr[c] * tx.get(src, c);
                                gx.data_mut()[src * cols + c] += gr[c] * tw.get(kk, c);
                            }
                        }
                    }
                }
                accumulate_owned(grads, *x, gx);
                accumulate_owned(grads, *w, gw);
                accumulate_owned(grads, *b, gb);
            }
            Op::GroupMean(a, group) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *o = x / *group as f64;
                    }
                }
                accumulate_owned(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate_owned(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Custom(inputs) => {
                let up = g.item();
                for (v, gi) in inputs {
                    accumulate_owned(grads, *v, gi.map(|x| up * x));
                }
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
