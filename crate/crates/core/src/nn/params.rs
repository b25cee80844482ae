use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, shaped parameter arrays. Blocks hold `ParamId`s into the store, so
/// two blocks that share a parameter simply hold the same id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.ids().map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradient accumulator aligned with a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.slots[id.0].as_mut()
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.slots.iter_mut().flatten().for_each(|t| t.scale_in_place(k));
    }

    /// Ids that received any gradient.
    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(i, _)| ParamId(i))
    }
}

pub mod init {
    use super::*;

    /// Uniform Xavier/Glorot init for a `fan_in x fan_out` weight.
    pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, fan_in, fan_out, bound)
    }

    pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
    }

    pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
    }
}
