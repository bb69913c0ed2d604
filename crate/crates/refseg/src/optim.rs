//! Persistent named parameters and the SGD optimizer.
//!
//! Parameters outlive the per-step tape: each training step binds them onto a
//! fresh [`Tape`] as leaves, runs forward/backward, accumulates the leaf
//! gradients back into the store, and applies one SGD update.

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Gradient accumulated over the current batch; same length as `value`.
    pub grad: Vec<T>,
}

pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter '{name}'");
        let id = ParamId(self.entries.len());
        let grad = vec![T::zero(); value.numel()];
        self.entries.push(ParamEntry { name: name.to_string(), value, grad });
        self.index.insert(name.to_string(), id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn grad_l2_norm(&self, prefix: &str) -> f64 {
        let mut acc = 0.0;
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                for &g in &e.grad {
                    let g = g.to_f64();
                    acc += g * g;
                }
            }
        }
        acc.sqrt()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Copies a parameter onto the tape as a differentiation leaf.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId, binds: &mut TapeBindings) -> Var {
        let v = tape.leaf(self.entries[id.0].value.clone().with_grad());
        binds.pairs.push((id, v));
        v
    }

    /// Pulls leaf gradients from a backpropagated tape into the store,
    /// scaled by `scale` (1/batch for mean-over-batch updates). Leaves the
    /// loss never reached keep a zero gradient; accumulating from a tape
    /// that has not run backward is a training-state error.
    pub fn accumulate(&mut self, tape: &Tape<T>, binds: &TapeBindings, scale: f64) -> Result<()> {
        let s: T = fl(scale);
        for &(id, v) in &binds.pairs {
            let Some(g) = tape.grad(v) else {
                if tape.backward_was_run() {
                    continue;
                }
                return Err(Error::MissingGrad { name: self.entries[id.0].name.clone() });
            };
            for (acc, &gi) in self.entries[id.0].grad.iter_mut().zip(g) {
                *acc = *acc + gi * s;
            }
        }
        Ok(())
    }
}

/// Which store parameters were bound to which tape leaves this step.
#[derive(Default)]
pub struct TapeBindings {
    pairs: Vec<(ParamId, Var)>,
}

impl TapeBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.pairs.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }
}

/// SGD hyperparameters for one training stage.
#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// SGD with momentum buffers:
/// `buf <- momentum * buf + grad;  p <- p - lr * (buf + weight_decay * p)`.
/// Accumulated gradients are cleared after the update.
pub struct Sgd<T> {
    cfg: SgdConfig,
    buffers: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let buffers = store.entries.iter().map(|e| vec![T::zero(); e.value.numel()]).collect();
        Ok(Sgd { cfg, buffers })
    }

    /// One update over every parameter whose name `frozen` does not match.
    pub fn step(&mut self, store: &mut ParamStore<T>, frozen: &dyn Fn(&str) -> bool) {
        let lr: T = fl(self.cfg.learning_rate);
        let mom: T = fl(self.cfg.momentum);
        let wd: T = fl(self.cfg.weight_decay);
        for (e, buf) in store.entries.iter_mut().zip(&mut self.buffers) {
            if frozen(&e.name) {
                e.grad.iter_mut().for_each(|g| *g = T::zero());
                continue;
            }
            for i in 0..e.grad.len() {
                buf[i] = mom * buf[i] + e.grad[i];
                e.value.data[i] = e.value.data[i] - lr * (buf[i] + wd * e.value.data[i]);
                e.grad[i] = T::zero();
            }
        }
    }
}

// ── deterministic initializers ───────────────────────────────────────

use rand::Rng;

/// Uniform in `[-limit, limit]`, drawn in a fixed element order.
pub fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, limit: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| fl(rng.gen_range(-limit..=limit))).collect();
    Tensor::new(shape, data)
}

/// He-style fan-in limit for conv / linear weights.
pub fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(v));
        (store, id)
    }

    fn fake_grad(store: &mut ParamStore<f64>, id: ParamId, g: f64) {
        store.entries[id.0].grad[0] = g;
    }

    #[test]
    fn sgd_plain_step() {
        let (mut store, id) = one_param(1.0);
        let mut sgd = Sgd::new(
            SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.0 },
            &store,
        )
        .unwrap();
        fake_grad(&mut store, id, 1.0);
        sgd.step(&mut store, &|_| false);
        assert!((store.value(id).data[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_grad_keeps_params() {
        let (mut store, id) = one_param(1.0);
        let mut sgd = Sgd::new(
            SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.0 },
            &store,
        )
        .unwrap();
        sgd.step(&mut store, &|_| false);
        assert_eq!(store.value(id).data[0], 1.0);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // buf1 = 1, p = 1 - 0.1 = 0.9; buf2 = 1.9, p = 0.9 - 0.19 = 0.71.
        let (mut store, id) = one_param(1.0);
        let mut sgd = Sgd::new(
            SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0 },
            &store,
        )
        .unwrap();
        fake_grad(&mut store, id, 1.0);
        sgd.step(&mut store, &|_| false);
        fake_grad(&mut store, id, 1.0);
        sgd.step(&mut store, &|_| false);
        assert!((store.value(id).data[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_training_state_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let _v = store.bind(&mut tape, id, &mut binds);
        // No backward pass ran, so the leaf has no gradient.
        match store.accumulate(&tape, &binds, 1.0) {
            Err(Error::MissingGrad { name }) => assert_eq!(name, "w"),
            other => panic!("expected missing-grad error, got {other:?}"),
        }
    }

    #[test]
    fn bad_sgd_config_rejected() {
        let store = ParamStore::<f64>::new();
        assert!(Sgd::new(
            SgdConfig { learning_rate: 0.0, momentum: 0.0, weight_decay: 0.0 },
            &store
        )
        .is_err());
        assert!(Sgd::new(
            SgdConfig { learning_rate: 0.1, momentum: 1.0, weight_decay: 0.0 },
            &store
        )
        .is_err());
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("lang.w", Tensor::scalar(1.0));
        let b = store.add("cap.w", Tensor::scalar(1.0));
        let mut sgd = Sgd::new(
            SgdConfig { learning_rate: 0.5, momentum: 0.0, weight_decay: 0.0 },
            &store,
        )
        .unwrap();
        store.entries[a.0].grad[0] = 1.0;
        store.entries[b.0].grad[0] = 1.0;
        sgd.step(&mut store, &|name| name.starts_with("lang."));
        assert_eq!(store.value(a).data[0], 1.0);
        assert_eq!(store.value(b).data[0], 0.5);
    }
}
