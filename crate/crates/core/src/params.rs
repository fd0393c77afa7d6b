//! Named parameter tensors and gradient accumulators.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Array2<f64>,
}

/// Every learnable tensor of the model, addressable by name.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

/// Seed for a tensor derived from the master seed and its name, so shared
/// modules start identical across model variants.
pub fn tensor_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Array2<f64>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.to_owned(), kind, value });
        self.index.insert(name.to_owned(), id);
        id
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init_uniform(&mut self, name: &str, kind: ParamKind, rows: usize, cols: usize, fan_in: usize, seed: u64) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, name));
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound));
        self.insert(name, kind, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Ids of all tensors whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.name(*id).starts_with(prefix))
    }

    pub fn zero_prefix(&mut self, prefix: &str) {
        let ids: Vec<_> = self.with_prefix(prefix).collect();
        for id in ids {
            self.get_mut(id).fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradients aligned with a [`ParameterStore`]; tensors never touched by a
/// backward pass stay `None`.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: Vec<Option<Array2<f64>>>,
}

impl GradientMap {
    pub fn new(len: usize) -> Self {
        GradientMap { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Mutable accumulator for `id`, allocated as zeros on first use.
    pub fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<f64> {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| Array2::zeros(shape))
    }

    pub fn accumulate(&mut self, other: &GradientMap) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                let slot = self.slot(ParamId(i), g.dim());
                *slot += g;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Global L2 norm over every slot.
    pub fn norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_bounded_and_name_seeded() {
        let mut a = ParameterStore::new();
        let mut b = ParameterStore::new();
        let ia = a.init_uniform("layer.w", ParamKind::Weight, 4, 9, 9, 7);
        b.init_uniform("other.w", ParamKind::Weight, 2, 2, 2, 7);
        let ib = b.init_uniform("layer.w", ParamKind::Weight, 4, 9, 9, 7);
        assert_eq!(a.get(ia), b.get(ib));
        assert!(a.get(ia).iter().all(|v| v.abs() < 1.0 / 3.0));
    }

    #[test]
    fn gradient_map_accumulates() {
        let mut g = GradientMap::new(2);
        *g.slot(ParamId(1), (1, 2)) += 1.0;
        let mut h = GradientMap::new(2);
        h.accumulate(&g);
        h.accumulate(&g);
        h.scale(0.5);
        assert_eq!(h.get(ParamId(1)).unwrap()[[0, 1]], 1.0);
        assert!(h.get(ParamId(0)).is_none());
    }
}
