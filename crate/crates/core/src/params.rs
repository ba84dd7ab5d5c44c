//! Named parameter storage, gradients keyed by parameter identity, and the
//! adaptive-moment optimizer.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors. Order of insertion is the
/// serialization order of checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a new tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Glorot-uniform weight matrix `fan_in × fan_out`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(&[fan_in, fan_out], limit, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter sets differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.same_shape(src, "ParamStore::copy_from")?;
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Replaces the tensor stored under `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        self.values[id.0].same_shape(&value, "ParamStore::assign")?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
/// Parameters that did not take part in the computation read as zero.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Gradient for `id`; zeros shaped like `like` when the parameter was unused.
    pub fn get_or_zeros(&self, id: ParamId, like: &Tensor<T>) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    /// Adds another gradient set (same store) into this one.
    pub fn merge(&mut self, other: &Self) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 0.0,
        }
    }
}

/// Adaptive-moment optimizer state for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient still decay their
    /// moment estimates, like a zero gradient would.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step_masked(store, grads, |_| true)
    }

    /// Like [`Adam::step`] but only touches parameters accepted by `train`.
    pub fn step_masked(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        train: impl Fn(ParamId) -> bool,
    ) {
        self.step += 1;
        let c = self.config;
        let clip = if c.max_grad_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > c.max_grad_norm {
                c.max_grad_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let (b1, b2) = (sc::<T>(c.beta1), sc::<T>(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = sc::<T>(c.lr * bc2.sqrt() / bc1);
        let eps = sc::<T>(c.eps * bc2.sqrt());
        let clip = sc::<T>(clip);
        for id in store.ids().collect::<Vec<_>>() {
            if !train(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap());
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
        );
        for _ in 0..2000 {
            let x = store.get(id).clone();
            let mut g = Gradients::empty(store.len());
            g.accumulate(id, &x.scale(2.0));
            opt.step(&mut store, &g);
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }

    #[test]
    fn unused_parameter_reads_as_zero() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add_zeros("a", &[2, 3]);
        let g = Gradients::empty(store.len());
        assert_eq!(g.get_or_zeros(a, store.get(a)), Tensor::zeros(&[2, 3]));
    }
}
