//! Text encoder (query tokens to `Q_F`) and the object encoder, in which
//! object slots cross-attend to the query but never to each other.

use std::sync::Arc;

use rand::Rng;

use crate::nn::layers::{sinusoidal_positions, AttnBlock, Builder, FeedForward, Linear};
use crate::nn::{AttnLayout, Graph, Tensor, Var};
use crate::objects::ObjectBank;

/// Encoded query tokens `[L x D]` and their validity.
#[derive(Debug, Clone)]
pub struct QueryFeatures {
    pub tokens: Var,
    pub mask: Arc<Vec<bool>>,
}

impl QueryFeatures {
    /// Key validity for attention over the tokens; `None` when all are valid.
    pub fn key_valid(&self) -> Option<Vec<bool>> {
        if self.mask.iter().all(|&m| m) {
            None
        } else {
            Some(self.mask.to_vec())
        }
    }
}

/// Encoded object slots `[T·N_o x D]`; masked slots are exactly zero.
#[derive(Debug, Clone)]
pub struct ObjectFeatures {
    pub features: Var,
    pub mask: Arc<Vec<bool>>,
    pub slots: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub proj: Linear,
    pub layers: Vec<(AttnBlock, FeedForward)>,
    pub positions: bool,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        d_t: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        positions: bool,
    ) -> Self {
        b.scoped("text", |b| TextEncoder {
            proj: Linear::new(b, "proj", d_t, dim),
            layers: (0..layers)
                .map(|i| {
                    b.scoped(&i.to_string(), |b| (AttnBlock::new(b, "attn", dim, heads), FeedForward::new(b, "ffn", dim, hidden)))
                })
                .collect(),
            positions,
        })
    }

    /// `tokens: [L x D_T]`, `mask`: true for real tokens.
    pub fn forward(&self, g: &mut Graph, tokens: Var, mask: Vec<bool>) -> QueryFeatures {
        let (len, _) = g.shape(tokens);
        assert_eq!(mask.len(), len);
        let mut x = self.proj.forward(g, tokens);
        if self.positions {
            let dim = g.shape(x).1;
            let pe = g.constant(sinusoidal_positions(len, dim));
            x = g.add(x, pe);
        }
        let mask = Arc::new(mask);
        let key_valid = if mask.iter().all(|&m| m) { None } else { Some(mask.to_vec()) };
        let layout = Arc::new(AttnLayout::dense(len, len, key_valid));
        for (attn, ffn) in &self.layers {
            x = attn.forward(g, x, None, layout.clone());
            x = ffn.forward(g, x);
        }
        QueryFeatures { tokens: x, mask }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectEncoder {
    pub proj: Linear,
    pub layers: Vec<(AttnBlock, FeedForward)>,
}

impl ObjectEncoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, d_o: usize, dim: usize, layers: usize, heads: usize, hidden: usize) -> Self {
        b.scoped("objenc", |b| ObjectEncoder {
            proj: Linear::new(b, "proj", d_o, dim),
            layers: (0..layers)
                .map(|i| {
                    b.scoped(&i.to_string(), |b| (AttnBlock::new(b, "attn", dim, heads), FeedForward::new(b, "ffn", dim, hidden)))
                })
                .collect(),
        })
    }

    /// Encodes the filled slots of `bank`; empty slots stay zero.
    pub fn forward(&self, g: &mut Graph, bank: &ObjectBank, query: &QueryFeatures) -> ObjectFeatures {
        let n_rows = bank.clips * bank.slots;
        let dim = g.shape(query.tokens).1;
        let mask = Arc::new(bank.mask.clone());
        let idx: Vec<usize> = (0..n_rows).filter(|&r| bank.mask[r]).collect();
        if idx.is_empty() {
            let features = g.constant(Tensor::zeros(n_rows, dim));
            return ObjectFeatures { features, mask, slots: bank.slots };
        }
        let idx = Arc::new(idx);
        let raw = g.constant(bank.features.clone());
        let filled = g.gather_rows(raw, idx.clone());
        let mut x = self.proj.forward(g, filled);
        let len = g.shape(query.tokens).0;
        let layout = Arc::new(AttnLayout::dense(idx.len(), len, query.key_valid()));
        for (attn, ffn) in &self.layers {
            x = attn.forward(g, x, Some(query.tokens), layout.clone());
            x = ffn.forward(g, x);
        }
        let features = g.scatter_rows(x, idx, n_rows);
        ObjectFeatures { features, mask, slots: bank.slots }
    }
}
