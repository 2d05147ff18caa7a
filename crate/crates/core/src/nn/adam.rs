use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate that halves every `halve_every` epochs (epochs are 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial: f32,
    pub halve_every: usize,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let halvings = epoch.saturating_sub(1) / self.halve_every.max(1);
        self.initial * 0.5f32.powi(halvings as i32)
    }
}

/// Epoch/batch/learning-rate settings shared by both training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub halve_every: usize,
    pub seed: u64,
    /// Run every gradient chunk on the calling thread.
    pub deterministic: bool,
}

impl TrainSchedule {
    pub fn lr_schedule(&self) -> StepSchedule {
        StepSchedule {
            initial: self.lr,
            halve_every: self.halve_every,
        }
    }
}

/// Moment estimates, one pair per parameter tensor in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub state: AdamState,
}

impl Adam {
    pub fn new<M: Parameterized>(model: &M) -> Self {
        let zeros: Vec<Tensor> = model
            .named_params()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                first: zeros.clone(),
                second: zeros,
            },
        }
    }

    pub fn with_state(state: AdamState) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state,
        }
    }

    /// One bias-corrected Adam update of `model` using `grads` (same layout).
    pub fn step<M: Parameterized>(&mut self, model: &mut M, grads: &M, lr: f32) -> Result<()> {
        let params = model.named_params_mut();
        let grads = grads.named_params();
        if params.len() != grads.len() || params.len() != self.state.first.len() {
            return Err(Error::Domain("optimizer state does not match model".into()));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((_, p), (_, g)), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.state.first.iter_mut().zip(self.state.second.iter_mut()))
        {
            let p = p.data_mut();
            let g = g.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_every_twenty_epochs() {
        let s = StepSchedule {
            initial: 1e-3,
            halve_every: 20,
        };
        assert_eq!(s.lr_at(1), 1e-3);
        assert_eq!(s.lr_at(20), 1e-3);
        assert_eq!(s.lr_at(21), 5e-4);
        assert_eq!(s.lr_at(41), 2.5e-4);
    }
}
