//! Training configuration and parameter updates: SGD and Adam with
//! optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied to the learning rate after each epoch.
    pub lr_decay: f64,
    /// L2 coefficient.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Max global gradient norm; None disables clipping.
    pub grad_clip: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// When set, overrides every head dropout rate.
    pub dropout_override: Option<f64>,
    /// Learning-rate factor for the fine-tuning stage of semi-supervised
    /// training.
    pub ft_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lr_decay: 1.0,
            lambda: 0.01,
            epochs: 50,
            batch_size: 32,
            grad_clip: Some(5.0),
            optimizer: OptimizerKind::default(),
            seed: 0,
            dropout_override: None,
            ft_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::argument("learning_rate must be > 0".to_string()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::argument("lr_decay must be in (0, 1]".to_string()));
        }
        if self.lambda < 0.0 {
            return Err(Error::argument("lambda must be >= 0".to_string()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::argument("epochs and batch_size must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Learning rate at a given epoch under multiplicative decay.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

/// Holds Adam moment state across steps; shapes are fixed at construction
/// from the parameter slices they will update.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[&[f64]]) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|s| vec![0.0; s.len()]).collect();
        Optimizer {
            kind,
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
        }
    }

    /// Apply one update. Clipping rescales the whole gradient so its global
    /// norm does not exceed `grad_clip`.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
        grad_clip: Option<f64>,
    ) {
        assert_eq!(params.len(), grads.len());
        let scale = match grad_clip {
            Some(max_norm) => {
                let norm: f64 = grads
                    .iter()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= lr * scale * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for j in 0..p.len() {
                        let gv = scale * g[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
