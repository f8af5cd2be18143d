//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        /// L2 penalty folded into the gradient.
        #[serde(default)]
        weight_decay: f64,
    },
    AdamW { lr: f64, weight_decay: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig::AdamW {
            lr,
            weight_decay: 0.01,
        }
    }

    pub fn with_weight_decay(self, wd: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { lr, momentum, .. } => OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay: wd,
            },
            OptimizerConfig::AdamW { lr, .. } => OptimizerConfig::AdamW {
                lr,
                weight_decay: wd,
            },
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::AdamW { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wd = match *self {
            OptimizerConfig::Sgd { weight_decay, .. } | OptimizerConfig::AdamW { weight_decay, .. } => {
                weight_decay
            }
        };
        if !(wd.is_finite() && wd >= 0.0) {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {wd}")));
        }
        let lr = self.lr();
        // lr = 0 is allowed and freezes the parameters.
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            milestones: Vec::new(),
            gamma: 0.1,
        }
    }
}

impl StepDecay {
    pub fn factor(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.gamma.powi(passed as i32)
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        let second = match config {
            OptimizerConfig::AdamW { .. } => vec![0.0; n_params],
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            first: vec![0.0; n_params],
            second,
            t: 0,
        }
    }

    /// Applies one update with the base learning rate scaled by `lr_scale`.
    /// Entries where `frozen` is true are left untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_scale: f64) {
        self.step_masked(params, grads, lr_scale, |_| false)
    }

    pub fn step_masked(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr_scale: f64,
        frozen: impl Fn(usize) -> bool,
    ) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let lr = lr * lr_scale;
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    if frozen(i) {
                        continue;
                    }
                    let v = &mut self.first[i];
                    *v = momentum * *v + g + weight_decay * *p;
                    *p -= lr * *v;
                }
            }
            OptimizerConfig::AdamW { lr, weight_decay } => {
                let lr = lr * lr_scale;
                let bc1 = 1.0 - BETA1.powi(self.t as i32);
                let bc2 = 1.0 - BETA2.powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    if frozen(i) {
                        continue;
                    }
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                    *p -= lr * (update + weight_decay * *p);
                }
            }
        }
    }
}
