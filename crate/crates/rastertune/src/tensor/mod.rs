//! Minimal reverse-mode autodiff over `ndarray`, sized for desk-scale models.
//!
//! A [`ParamSet`] owns named, persistent parameters. Each forward pass records
//! onto a fresh [`Tape`]; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients per parameter into a [`GradStore`]. All math is f32,
//! single-threaded, and bit-deterministic for a fixed op sequence.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub mod init;
pub mod ops;
pub mod optim;

#[cfg(test)]
mod tests;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a persistent parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    path: String,
    value: ArrayD<f32>,
    trainable: bool,
}

/// Named parameter store. Paths are dot-separated (`backbone.blocks.0.qkv.weight`)
/// and unique; insertion order is the deterministic construction order.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_path: BTreeMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate paths: those are construction
    /// bugs, not runtime conditions.
    pub fn add(&mut self, path: impl Into<String>, value: ArrayD<f32>) -> ParamId {
        let path = path.into();
        assert!(
            !self.by_path.contains_key(&path),
            "duplicate parameter path {path}"
        );
        let id = ParamId(self.entries.len());
        self.by_path.insert(path.clone(), id);
        self.entries.push(ParamEntry {
            path,
            value,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f32>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].path
        );
        self.entries[id.0].value = value;
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn id_of(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Marks every parameter whose path starts with `prefix` (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.path.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f32>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.path.as_str(), &e.value))
    }

    /// Flat snapshot of all parameter tensors, keyed by path.
    pub fn to_map(&self) -> BTreeMap<String, ArrayD<f32>> {
        self.entries
            .iter()
            .map(|e| (e.path.clone(), e.value.clone()))
            .collect()
    }
}

/// Per-parameter gradients produced by one backward pass.
pub struct GradStore {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        Self {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.grads[id.0].as_ref()
    }

    fn accumulate(&mut self, id: ParamId, g: ArrayD<f32>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    /// Sum of L2 norms over all present gradients.
    pub fn total_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

type BackwardFn = Box<dyn Fn(&ArrayD<f32>, &[&ArrayD<f32>], &ArrayD<f32>) -> Vec<ArrayD<f32>>>;

enum TapeOp {
    Leaf,
    Param(ParamId),
    Node { parents: Vec<usize>, back: BackwardFn },
}

/// Recording of one forward pass over a borrowed [`ParamSet`].
pub struct Tape<'p> {
    params: &'p ParamSet,
    values: Vec<ArrayD<f32>>,
    ops: Vec<TapeOp>,
    grad_enabled: bool,
    rng: ChaCha8Rng,
}

impl<'p> Tape<'p> {
    /// Gradient-recording tape; `seed` drives stochastic ops (dropout).
    pub fn for_training(params: &'p ParamSet, seed: u64) -> Self {
        Self {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// No gradients, no stochastic ops: evaluation/prediction mode.
    pub fn for_inference(params: &'p ParamSet) -> Self {
        Self {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            grad_enabled: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, t: Tensor) -> &ArrayD<f32> {
        &self.values[t.id]
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.values[t.id].shape()
    }

    pub fn scalar(&self, t: Tensor) -> f32 {
        debug_assert_eq!(self.values[t.id].len(), 1);
        self.values[t.id].iter().next().copied().unwrap_or(0.0)
    }

    fn push(&mut self, value: ArrayD<f32>, op: TapeOp) -> Tensor {
        debug_assert!(value.is_standard_layout());
        self.values.push(value);
        self.ops.push(op);
        Tensor {
            id: self.values.len() - 1,
        }
    }

    /// Introduces an input (constant) leaf.
    pub fn input(&mut self, value: ArrayD<f32>) -> Tensor {
        let value = ops::standard(value);
        self.push(value, TapeOp::Leaf)
    }

    /// Introduces a parameter leaf; gradients flow back to the [`ParamSet`].
    pub fn param(&mut self, id: ParamId) -> Tensor {
        let value = self.params.value(id).clone();
        let op = if self.grad_enabled {
            TapeOp::Param(id)
        } else {
            TapeOp::Leaf
        };
        self.push(value, op)
    }

    pub(crate) fn node(
        &mut self,
        value: ArrayD<f32>,
        parents: Vec<usize>,
        back: BackwardFn,
    ) -> Tensor {
        let value = ops::standard(value);
        if self.grad_enabled {
            self.push(value, TapeOp::Node { parents, back })
        } else {
            self.push(value, TapeOp::Leaf)
        }
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Reverse pass from a scalar loss. Returns per-parameter gradients.
    pub fn backward(&self, loss: Tensor) -> Result<GradStore> {
        if self.values[loss.id].len() != 1 {
            return Err(TensorError::Shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads = GradStore::new(self.params.len());
        let mut node_grads: Vec<Option<ArrayD<f32>>> = (0..self.values.len()).map(|_| None).collect();
        node_grads[loss.id] = Some(ArrayD::ones(IxDyn(self.values[loss.id].shape())));

        for i in (0..=loss.id).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                TapeOp::Leaf => {}
                TapeOp::Param(pid) => grads.accumulate(*pid, g),
                TapeOp::Node { parents, back } => {
                    let pvals: Vec<&ArrayD<f32>> =
                        parents.iter().map(|&p| &self.values[p]).collect();
                    let pgrads = back(&g, &pvals, &self.values[i]);
                    debug_assert_eq!(pgrads.len(), parents.len());
                    for (&p, pg) in parents.iter().zip(pgrads) {
                        debug_assert_eq!(pg.shape(), self.values[p].shape());
                        match &mut node_grads[p] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}
