//! Adam with the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use serde::{Deserialize, Serialize};

/// Learning-rate step decay: `base_lr * factor^(epoch / every_epochs)`.
///
/// The decay applies starting at the boundary epoch, so epochs
/// 0..every_epochs-1 run at the base rate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepDecay {
    pub factor: f64,
    pub every_epochs: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            factor: 0.5,
            every_epochs: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: StepDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: StepDecay::default(),
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect at a given (0-based) epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch / self.decay.every_epochs.max(1);
        self.base_lr * self.decay.factor.powi(steps as i32)
    }
}

/// First/second moment buffers, laid out in `ParamStore` insertion order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Rehydrate from checkpointed buffers.
    pub fn from_parts(m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Self {
        AdamState { m, v, step }
    }

    pub fn parts(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.step)
    }
}

/// One Adam update over every parameter, reading gradients from the store.
///
/// `epoch` selects the decayed learning rate.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
    epoch: usize,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adam state for {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    let lr = cfg.lr_at(epoch);
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);

    for (i, (name, t)) in params.iter_mut().enumerate() {
        let n = t.len();
        if state.m[i].len() != n {
            return Err(Error::shape(format!(
                "adam moment size {} for parameter {name} of size {n}",
                state.m[i].len()
            )));
        }
        let grad = t
            .grad()
            .ok_or_else(|| Error::shape(format!("parameter {name} has no gradient")))?
            .to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let values = t.values_mut();
        for j in 0..n {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            values[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(values));
        s
    }

    #[test]
    fn lr_schedule_boundaries() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(49), 1e-3);
        assert_eq!(cfg.lr_at(50), 5e-4);
        assert_eq!(cfg.lr_at(99), 5e-4);
        assert_eq!(cfg.lr_at(100), 2.5e-4);
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut params = store_with(vec![1.0, -2.0, 3.0]);
        params.get_mut("w").unwrap().set_grad(&[0.0, 0.0, 0.0]).unwrap();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, &AdamConfig::default(), 0).unwrap();
        assert_eq!(params.get("w").unwrap().values(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_is_signed_unit_step() {
        // After bias correction the first update is -lr * g / (|g| + eps').
        let mut params = store_with(vec![0.0]);
        params.get_mut("w").unwrap().set_grad(&[0.37]).unwrap();
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, &cfg, 0).unwrap();
        let got = params.get("w").unwrap().values()[0];
        assert!((got + cfg.base_lr).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = store_with(vec![1.0]);
        params.get_mut("w").unwrap().set_grad(&[0.1]).unwrap();
        let mut state = AdamState::new(&params);
        // Grow the store after state creation.
        params.insert("extra", Tensor::zeros(1, 2));
        params.get_mut("extra").unwrap().set_grad(&[0.0, 0.0]).unwrap();
        assert!(adam_step(&mut params, &mut state, &AdamConfig::default(), 0).is_err());
    }
}
