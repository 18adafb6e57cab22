use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::{NeuralError, Tensor};
use crate::rng::Rng;

#[derive(Debug, PartialEq)]
struct Param {
    value: Tensor,
    grad: Tensor,
}

/// Named parameters with gradient accumulators. Every read of a value bumps
/// an access counter so callers can prove a set was never touched.
#[derive(Debug)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    reads: AtomicU64,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), Param { value: p.value.clone(), grad: p.grad.clone() }))
            .collect();
        Self { params, reads: AtomicU64::new(0) }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), reads: AtomicU64::new(0) }
    }

    /// Adds a `rows x cols` parameter drawn uniformly from `±1/sqrt(rows)`.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> Result<(), NeuralError> {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor { rows, cols, data })
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NeuralError> {
        if self.params.contains_key(name) {
            return Err(NeuralError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.rows, value.cols);
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NeuralError> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.params.get(name).map(|p| &p.value).ok_or_else(|| NeuralError::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, NeuralError> {
        self.params.get_mut(name).map(|p| &mut p.value).ok_or_else(|| NeuralError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, NeuralError> {
        self.params.get(name).map(|p| &p.grad).ok_or_else(|| NeuralError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn reset_reads(&self) {
        self.reads.store(0, Ordering::Relaxed);
    }

    pub(crate) fn accumulate(&mut self, name: &str, g: &Tensor) -> bool {
        match self.params.get_mut(name) {
            Some(p) => {
                p.grad.add_assign(g);
                true
            }
            None => false,
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params.values().flat_map(|p| p.grad.data.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let n = self.grad_norm();
        if n > max_norm && n > 0.0 {
            let k = max_norm / n;
            for p in self.params.values_mut() {
                p.grad.data.iter_mut().for_each(|g| *g *= k);
            }
        }
    }

    /// `theta <- theta - lr * grad`, then clears gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in self.params.values_mut() {
            for (v, g) in p.value.data.iter_mut().zip(&p.grad.data) {
                *v -= lr * g;
            }
            p.grad.fill(0.0);
        }
    }

    /// Copies every value from `online`.
    pub fn hard_update(&mut self, online: &ParamSet) {
        for (k, p) in self.params.iter_mut() {
            if let Some(o) = online.params.get(k) {
                p.value.data.copy_from_slice(&o.value.data);
            }
        }
    }

    /// `target <- tau * online + (1 - tau) * target`.
    pub fn soft_update(&mut self, online: &ParamSet, tau: f64) {
        for (k, p) in self.params.iter_mut() {
            if let Some(o) = online.params.get(k) {
                for (t, v) in p.value.data.iter_mut().zip(&o.value.data) {
                    *t = tau * v + (1.0 - tau) * *t;
                }
            }
        }
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, p)| (k.clone(), Param { value: p.value.clone(), grad: p.grad.clone() }))
            .collect();
        Self { params, reads: AtomicU64::new(0) }
    }

    /// Union of disjoint sets.
    pub fn merged(sets: &[&ParamSet]) -> Result<ParamSet, NeuralError> {
        let mut out = ParamSet::new();
        for s in sets {
            for (k, p) in &s.params {
                out.insert(k, p.value.clone())?;
            }
        }
        Ok(out)
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }
}

/// Adam optimiser state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update from the accumulated gradients, which are then cleared.
    pub fn step(&mut self, ps: &mut ParamSet) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in ps.params.iter_mut() {
            let n = p.value.len();
            let m = self.m.entry(k.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(k.clone()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = p.grad.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p.value.data[i] -= self.lr * (m[i] / b1t) / ((v[i] / b2t).sqrt() + self.eps);
            }
            p.grad.fill(0.0);
        }
    }
}
