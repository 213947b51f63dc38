//! Stochastic gradient descent with momentum, Adam, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::SgdMomentum {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("optimizer lr must be positive, got {lr}")));
        }
        match *self {
            OptimizerConfig::SgdMomentum {
                momentum,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!(
                        "optimizer momentum must lie in [0, 1), got {momentum}"
                    )));
                }
                if !(weight_decay >= 0.0) {
                    return Err(Error::Config("optimizer weight_decay must be non-negative".into()));
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::Config("adam betas must lie in [0, 1)".into()));
                }
                if !(eps > 0.0) || !(weight_decay >= 0.0) {
                    return Err(Error::Config(
                        "adam eps must be positive and weight_decay non-negative".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Heavy-ball SGD with weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let p = param.data_mut();
    for ((p, &g), v) in p.iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// One Adam update with decoupled weight decay. `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let p = param.data_mut();
    for (((p, &g), m), v) in p
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *p -= lr * weight_decay * *p;
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer together with its per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.params().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let second = match cfg {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            cfg,
            first: zeros,
            second,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Apply the accumulated gradients of `params` with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        match self.cfg {
            OptimizerConfig::SgdMomentum {
                momentum,
                weight_decay,
                ..
            } => {
                for ((p, g), vel) in params.values_and_grads_mut().zip(&mut self.first) {
                    sgd_momentum_step(p, g, vel, lr, momentum, weight_decay);
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                for (((p, g), m), v) in params
                    .values_and_grads_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    adam_step(p, g, m, v, self.t, lr, beta1, beta2, eps, weight_decay);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate to zero over `total_steps`; when unset,
    /// the run length is used.
    CosineDecay {
        #[serde(default)]
        total_steps: Option<usize>,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::CosineDecay { total_steps: None }
    }
}

impl Schedule {
    pub fn lr_at(&self, base: f64, step: usize, run_steps: usize) -> f64 {
        let total = match *self {
            Schedule::Constant => return base,
            Schedule::CosineDecay { total_steps } => total_steps.unwrap_or(run_steps),
        };
        if total == 0 {
            return base;
        }
        let frac = step.min(total) as f64 / total as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
