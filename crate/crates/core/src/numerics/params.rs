use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{NumericsError, Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named parameters in insertion (manifest) order with their Adam moments.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
    step: u64,
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
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.first_moment.push(Tensor::zeros(value.shape()));
        self.second_moment.push(Tensor::zeros(value.shape()));
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Matrix initialised from Normal(0, std²).
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::filled(shape, T::one()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Same parameters at another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            out.insert(name, value.cast());
        }
        out.step = self.step;
        out
    }

    /// Standard Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &ParamGrads<T>, cfg: &AdamConfig) -> Result<(), NumericsError> {
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(NumericsError::NanGradient { param: self.names[i].clone() });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 - cfg.beta1.powi(t));
        let corr2 = T::of(1.0 - cfg.beta2.powi(t));
        let lr = T::of(cfg.lr);
        let eps = T::of(cfg.eps);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = self.values[i].data_mut();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Gradients for every parameter of a store; `None` means no path from the
/// loss reached the parameter (an all-zero gradient).
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(count: usize) -> Self {
        Self { grads: vec![None; count] }
    }

    pub fn set(&mut self, id: ParamId, g: Tensor<T>) {
        self.grads[id.0] = Some(g);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient as a dense vector, zeros when unreachable.
    pub fn dense(&self, store: &ParamStore<T>, id: ParamId) -> Vec<T> {
        match self.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![T::zero(); store.get(id).len()],
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sum_of_squares).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = T::of(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v = *v * scale;
                }
            }
        }
        norm
    }

    /// Accumulates another set of gradients in place.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}
