//! SGD with momentum and Adam, one state per block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, ParamId, Params};
use crate::tensor::{Scalar, Tensor};

/// Optimizer FLOPs per step are charged as this multiple of the parameter count.
pub const OPTIMIZER_FLOPS_PER_PARAM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgdm {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
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
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgdm(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgdm { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgdm { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgdm { momentum, .. } => OptimizerConfig::Sgdm { lr, momentum },
            OptimizerConfig::Adam {
                beta1, beta2, eps, ..
            } => OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgdm { .. } => "sgdm",
            OptimizerConfig::Adam { .. } => "adam",
        }
    }
}

/// `count` learning rates log-spaced over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Default sweep grid: six rates log-spaced in `[1e-4, 3e-2]`.
pub fn default_lr_grid() -> Vec<f64> {
    log_spaced(1e-4, 3e-2, 6)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Slot {
    Momentum(Tensor),
    Adam { m: Tensor, v: Tensor },
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub slots: BTreeMap<ParamId, Slot>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update for every parameter present in `grads`.
    pub fn step(&mut self, params: &mut Params, grads: &GradientSet) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("optimizer gradient"));
            }
            let p = params.get(id)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgdm { lr, momentum } => {
                for (id, g) in grads.iter() {
                    let slot = self
                        .slots
                        .entry(id)
                        .or_insert_with(|| Slot::Momentum(Tensor::zeros(g.shape())));
                    let Slot::Momentum(v) = slot else {
                        return Err(Error::config("optimizer slot kind changed"));
                    };
                    sgdm_update(params.get_mut(id)?, v, g, lr as Scalar, momentum as Scalar)?;
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let c1 = (1.0 - beta1.powi(t)) as Scalar;
                let c2 = (1.0 - beta2.powi(t)) as Scalar;
                for (id, g) in grads.iter() {
                    let slot = self.slots.entry(id).or_insert_with(|| Slot::Adam {
                        m: Tensor::zeros(g.shape()),
                        v: Tensor::zeros(g.shape()),
                    });
                    let Slot::Adam { m, v } = slot else {
                        return Err(Error::config("optimizer slot kind changed"));
                    };
                    adam_update(
                        params.get_mut(id)?,
                        m,
                        v,
                        g,
                        AdamCoefficients {
                            lr: lr as Scalar,
                            beta1: beta1 as Scalar,
                            beta2: beta2 as Scalar,
                            eps: eps as Scalar,
                            correction1: c1,
                            correction2: c2,
                        },
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Slot tensors flattened to `(name, tensor)` pairs for checkpoints.
    pub fn named_slots(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, slot) in &self.slots {
            match slot {
                Slot::Momentum(v) => out.push((format!("{prefix}.momentum.{id}"), v.clone())),
                Slot::Adam { m, v } => {
                    out.push((format!("{prefix}.m.{id}"), m.clone()));
                    out.push((format!("{prefix}.v.{id}"), v.clone()));
                }
            }
        }
        out
    }
}

/// `v <- momentum*v + g; p <- p - lr*v`
pub fn sgdm_update(
    p: &mut Tensor,
    v: &mut Tensor,
    g: &Tensor,
    lr: Scalar,
    momentum: Scalar,
) -> Result<()> {
    for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *vi = momentum * *vi + gi;
        *pi -= lr * *vi;
    }
    if p.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("sgdm_update"))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamCoefficients {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    /// `1 - beta1^t`
    pub correction1: Scalar,
    /// `1 - beta2^t`
    pub correction2: Scalar,
}

pub fn adam_update(
    p: &mut Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    g: &Tensor,
    c: AdamCoefficients,
) -> Result<()> {
    for (((pi, mi), vi), &gi) in p
        .data_mut()
        .iter_mut()
        .zip(m.data_mut())
        .zip(v.data_mut())
        .zip(g.data())
    {
        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
        let m_hat = *mi / c.correction1;
        let v_hat = *vi / c.correction2;
        *pi -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    if p.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("adam_update"))
    }
}
