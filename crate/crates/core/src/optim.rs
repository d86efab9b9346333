//! First-order optimizers over a list of named tensors with per-tensor
//! learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD momentum.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for a fixed tensor list.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    lrs: Vec<f64>,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl Optimizer {
    /// `shapes` and `lrs` are in the order the tensors will be passed to
    /// [`Optimizer::step`].
    pub fn new(config: OptimizerConfig, shapes: &[(usize, usize)], lrs: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if shapes.len() != lrs.len() {
            return Err(Error::Shape(format!(
                "{} tensors but {} learning rates",
                shapes.len(),
                lrs.len()
            )));
        }
        if let Some(lr) = lrs.iter().find(|&&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        Ok(Self {
            config,
            lrs,
            first: zeros(),
            second: zeros(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.lrs.len() || grads.len() != self.lrs.len() {
            return Err(Error::Shape(format!(
                "optimizer built for {} tensors, got {} params and {} gradients",
                self.lrs.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::Shape(format!(
                    "tensor {i}: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let lr = self.lrs[i];
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                match cfg.kind {
                    OptimizerKind::Adam | OptimizerKind::Adamw => {
                        let gk = if cfg.kind == OptimizerKind::Adam {
                            gk + cfg.weight_decay * *w
                        } else {
                            *w -= lr * cfg.weight_decay * *w;
                            gk
                        };
                        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                    OptimizerKind::Sgd => {
                        let gk = gk + cfg.weight_decay * *w;
                        m[k] = cfg.momentum * m[k] + gk;
                        *w -= lr * m[k];
                    }
                }
            }
        }
        Ok(())
    }
}
