//! Gradient-descent optimizer with an optional momentum buffer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Plain SGD (`momentum == 0`) or heavy-ball momentum.
///
/// `p ← p − lr·g` for every non-frozen parameter; with momentum
/// `v ← μ·v + g; p ← p − lr·v`. Frozen parameters are never written and
/// every gradient buffer is cleared after the step.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    learning_rate: T,
    momentum: T,
    velocity: HashMap<String, Vec<T>>,
    step_count: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T) -> Result<Self> {
        Self::with_momentum(learning_rate, T::zero())
    }

    pub fn with_momentum(learning_rate: T, momentum: T) -> Result<Self> {
        if !(learning_rate >= T::zero()) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {learning_rate}")));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: HashMap::new(),
            step_count: 0,
        })
    }

    pub fn learning_rate(&self) -> T {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        // Check first so a contract failure leaves the store untouched.
        if let Some(p) = store.iter().find(|p| !p.frozen && p.tensor.grad().is_none()) {
            return Err(Error::contract(format!("parameter {:?} has no gradient", p.name)));
        }
        let lr = self.learning_rate;
        for p in store.iter_mut() {
            if !p.frozen {
                let grad = p.tensor.grad().expect("checked above").to_vec();
                let update = if self.momentum.is_zero() {
                    grad
                } else {
                    let v = self
                        .velocity
                        .entry(p.name.clone())
                        .or_insert_with(|| vec![T::zero(); grad.len()]);
                    v.iter_mut().zip(&grad).for_each(|(v, &g)| *v = self.momentum * *v + g);
                    v.clone()
                };
                p.tensor
                    .data_mut()
                    .iter_mut()
                    .zip(update)
                    .for_each(|(x, u)| *x -= lr * u);
            }
            p.tensor.clear_grad();
        }
        self.step_count += 1;
        Ok(())
    }
}
