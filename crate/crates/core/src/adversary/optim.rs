//! Adam and AdamW with a stepped exponential learning-rate schedule.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnengine::WeightStore;

pub const GENERATOR_LR: f32 = 5e-4;
pub const DISCRIMINATOR_LR: f32 = 2e-4;
pub const WEIGHT_DECAY: f32 = 0.01;
pub const LR_DECAY: f32 = 0.99;
pub const EPOCHS_PER_DECAY: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW { weight_decay: f32 },
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub base_lr: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub epoch: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self {
            kind,
            base_lr: lr,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            epoch: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn generator() -> Self {
        Self::new(OptimizerKind::AdamW { weight_decay: WEIGHT_DECAY }, GENERATOR_LR)
    }

    pub fn discriminator() -> Self {
        Self::new(OptimizerKind::Adam, DISCRIMINATOR_LR)
    }

    /// Marks the end of an epoch; every fifth one multiplies the rate by 0.99.
    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.lr = self.base_lr * LR_DECAY.powi((self.epoch / EPOCHS_PER_DECAY) as i32);
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    /// One update of every named parameter in `grads`.
    pub fn apply(&mut self, store: &mut WeightStore, grads: &[(String, Vec<f32>)]) -> Result<()> {
        for (name, g) in grads {
            let t = store.get(name)?;
            if t.numel() != g.len() {
                return Err(Error::shape("optimizer_step", format!("`{name}`: {} values, gradient {}", t.numel(), g.len())));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        for (name, g) in grads {
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let t = store.tensors.get_mut(name).expect("checked above");
            let p = Arc::make_mut(t);
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                if let OptimizerKind::AdamW { weight_decay } = self.kind {
                    p.data[i] -= self.lr * weight_decay * p.data[i];
                }
                p.data[i] -= (self.lr as f64 * mh / (vh.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnengine::Tensor;

    fn store(v: f32) -> WeightStore {
        let mut s = WeightStore::new("");
        s.insert("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(0.5);
        let mut o = OptimizerState::new(OptimizerKind::Adam, 0.1);
        o.apply(&mut s, &[("p".into(), vec![1.0])]).unwrap();
        assert!((s.get("p").unwrap().data[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(0.5);
        let mut o = OptimizerState::new(OptimizerKind::AdamW { weight_decay: 0.0 }, 0.1);
        o.apply(&mut s, &[("p".into(), vec![0.0])]).unwrap();
        assert_eq!(s.get("p").unwrap().data[0], 0.5);
    }

    #[test]
    fn schedule() {
        let mut o = OptimizerState::generator();
        for _ in 0..10 {
            o.advance_epoch();
        }
        assert!((o.lr - 5e-4 * 0.99 * 0.99).abs() < 1e-10);
    }

    #[test]
    fn gradient_size_is_checked() {
        let mut s = store(0.5);
        let mut o = OptimizerState::discriminator();
        assert!(matches!(o.apply(&mut s, &[("p".into(), vec![0.0, 1.0])]), Err(Error::ShapeMismatch { .. })));
    }
}
