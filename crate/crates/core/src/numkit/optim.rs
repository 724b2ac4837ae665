//! Stochastic gradient descent with momentum, weight decay, and an optional
//! cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::numkit::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over `total_steps`.
    Cosine { total_steps: u64 },
}

/// SGD state. Velocities are kept per parameter slot, aligned with the
/// parameter list handed to [`Sgd::step`], which must therefore keep a
/// stable order and length across calls.
pub struct Sgd {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    velocities: Vec<Vec<f64>>,
    steps_taken: u64,
}

impl Sgd {
    pub fn new(lr0: f64, momentum: f64, weight_decay: f64, schedule: Schedule) -> Sgd {
        Sgd {
            lr0,
            momentum,
            weight_decay,
            schedule,
            velocities: Vec::new(),
            steps_taken: 0,
        }
    }

    /// Learning rate used by step number `j` (zero-based).
    pub fn lr_at(&self, j: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine { total_steps } => {
                if total_steps == 0 || j >= total_steps {
                    0.0
                } else {
                    let frac = j as f64 / total_steps as f64;
                    self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                }
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// One update over every parameter: `v <- momentum*v + grad + wd*theta`,
    /// then `theta <- theta - lr(j)*v`.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let all = vec![true; params.len()];
        self.step_masked(params, &all)
    }

    /// Like [`Sgd::step`] but only slots with `update[i] == true` move;
    /// frozen slots keep their values, velocity, and accumulated gradient
    /// untouched. Updated slots must have a gradient.
    pub fn step_masked(&mut self, params: &[(String, Tensor)], update: &[bool]) -> Result<()> {
        assert_eq!(params.len(), update.len(), "mask length mismatch");
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        assert_eq!(
            self.velocities.len(),
            params.len(),
            "parameter list changed length between steps"
        );
        let lr = self.lr_at(self.steps_taken);
        for (i, (name, t)) in params.iter().enumerate() {
            if !update[i] {
                continue;
            }
            let grad = t
                .grad()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let mut values = t.values();
            let vel = &mut self.velocities[i];
            for k in 0..values.len() {
                vel[k] = self.momentum * vel[k] + grad[k] + self.weight_decay * values[k];
                values[k] -= lr * vel[k];
            }
            t.set_values(&values)?;
        }
        self.steps_taken += 1;
        Ok(())
    }
}
