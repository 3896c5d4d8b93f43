//! Named parameter storage.
//!
//! Layers never own tensors; they hold [`ParamId`] handles into a
//! [`ParamStore`] owned by the model. The store is the single source of
//! truth for serialization (names are dotted `stage.index.layer.tensor`
//! paths, in insertion order), for the optimizer (trainable entries, in
//! order), and for parameter counting. Non-trainable entries hold batch-norm
//! running statistics; they are serialized but never differentiated.

use crate::error::{Error, Result};
use crate::tensor::ops::Ops;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the store's creation order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

#[derive(Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a tensor under a unique dotted name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::contract(
                "param_store",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces a tensor, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: cur.name.clone(),
                stored: value.shape().to_vec(),
                expected: cur.value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable ids in insertion order (the optimizer's parameter order).
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].trainable)
            .collect()
    }

    /// Total scalar count over trainable tensors (weights, biases, affine
    /// batch-norm terms, learnable queries — not running statistics).
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Registers every trainable tensor on the runtime so gradients flow to
    /// it; non-trainable entries stay unbound.
    pub fn bind<R: Ops<T>>(&self, rt: &mut R) -> Bound<R::Val> {
        let slots = self
            .entries
            .iter()
            .map(|e| e.trainable.then(|| rt.param(e.value.clone())))
            .collect();
        Bound { slots }
    }
}

/// Per-store runtime bindings produced by [`ParamStore::bind`].
pub struct Bound<V> {
    slots: Vec<Option<V>>,
}

impl<V> Bound<V> {
    /// Binding for a trainable parameter; panics on a non-trainable id,
    /// which would be an internal wiring bug, not a user error.
    pub fn get(&self, id: ParamId) -> &V {
        self.slots[id.0]
            .as_ref()
            .expect("parameter was not bound (non-trainable id used in a differentiable position)")
    }

    /// Ids and bindings of every bound (trainable) parameter.
    pub fn bound_ids<'a>(&'a self) -> impl Iterator<Item = (ParamId, &'a V)> + 'a {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|v| (ParamId(i), v)))
    }
}

// ------------------------------------------------------------------- init

/// Uniform init with spatially-fanned bounds, `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fanin<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Zero-mean Gaussian init with the given standard deviation.
pub fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).map_err(|e| Error::contract("init", e.to_string()))?;
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn names_are_unique_and_counts_split_by_trainability() {
        let mut store = ParamStore::<f32>::new();
        let w = store
            .add("head.0.conv.kernel", Tensor::zeros(&[3, 3, 1, 2, 4]).unwrap(), true)
            .unwrap();
        store
            .add("head.0.bn.running_mean", Tensor::zeros(&[4]).unwrap(), false)
            .unwrap();
        assert!(store
            .add("head.0.conv.kernel", Tensor::zeros(&[1]).unwrap(), true)
            .is_err());
        assert_eq!(store.trainable_scalars(), 72);
        assert_eq!(store.trainable_ids(), vec![w]);
        assert_eq!(store.name(w), "head.0.conv.kernel");
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(&[2, 2]).unwrap(), true).unwrap();
        assert!(store.set(id, Tensor::zeros(&[2, 3]).unwrap()).is_err());
        assert!(store.set(id, Tensor::full(&[2, 2], 1.0).unwrap()).is_ok());
        assert_eq!(store.get(id).data(), &[1.0; 4]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Tensor<f32> = uniform_fanin(&mut stream(9, 0), &[4, 4], 16).unwrap();
        let b: Tensor<f32> = uniform_fanin(&mut stream(9, 0), &[4, 4], 16).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }
}
