//! SGD, Adam, and RMSprop parameter updates.
//!
//! Conventional defaults, pinned: Adam beta1 0.9, beta2 0.999, eps 1e-8;
//! RMSprop rho 0.9, eps 1e-7.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state; slots are created lazily in the deterministic
/// parameter order produced by the forward pass.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    /// Apply one update step. `updates` pairs each parameter array with
    /// its gradient, in the same order on every call.
    pub fn step(&mut self, updates: &mut [(&mut [f64], &[f64])]) {
        self.step_count += 1;
        while self.slots.len() < updates.len() {
            let n = updates[self.slots.len()].0.len();
            self.slots.push(Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in updates.iter_mut() {
                    for (wi, gi) in w.iter_mut().zip(g.iter()) {
                        *wi -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let t = self.step_count as f64;
                let bc1 = 1.0 - B1.powf(t);
                let bc2 = 1.0 - B2.powf(t);
                for ((w, g), slot) in updates.iter_mut().zip(&mut self.slots) {
                    for i in 0..w.len() {
                        slot.m[i] = B1 * slot.m[i] + (1.0 - B1) * g[i];
                        slot.v[i] = B2 * slot.v[i] + (1.0 - B2) * g[i] * g[i];
                        let mh = slot.m[i] / bc1;
                        let vh = slot.v[i] / bc2;
                        w[i] -= lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
            OptimizerKind::Rmsprop => {
                const RHO: f64 = 0.9;
                const EPS: f64 = 1e-7;
                for ((w, g), slot) in updates.iter_mut().zip(&mut self.slots) {
                    for i in 0..w.len() {
                        slot.v[i] = RHO * slot.v[i] + (1.0 - RHO) * g[i] * g[i];
                        w[i] -= lr * g[i] / (slot.v[i].sqrt() + EPS);
                    }
                }
            }
        }
    }
}
