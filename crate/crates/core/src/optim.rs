//! AdamW with decoupled weight decay, plus plain gradient descent.
//!
//! ```text
//! θ ← θ − lr·λ·θ
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    /// `θ ← θ − lr·g` (with the same decoupled decay term as AdamW).
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::invalid(
                "optimizer",
                format!("expected `adamw` or `sgd`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-2,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(
                "weight_decay",
                format!("must be finite and >= 0, got {}", self.weight_decay),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1/beta2", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Moment buffers are allocated on the first
    /// call; later calls must pass tensors of the same shapes.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: {} parameters, {} gradients",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Shape("parameter shapes changed between steps".into()));
        }

        self.step += 1;
        let OptimizerConfig {
            kind,
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let decay = 1.0 - lr * weight_decay;

        match kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi = *pi * decay - lr * gi;
                    }
                }
            }
            OptimizerKind::AdamW => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(kind: OptimizerKind, lr: f64, wd: f64, p: &mut [f64], g: &[f64]) {
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            lr,
            weight_decay: wd,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.step(&mut [p], &[g]).unwrap();
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        for kind in [OptimizerKind::AdamW, OptimizerKind::Sgd] {
            let mut p = vec![0.5, -1.5, 3.0];
            run(kind, 0.1, 0.0, &mut p, &[0.0; 3]);
            assert_eq!(p, vec![0.5, -1.5, 3.0]);
        }
    }

    #[test]
    fn sgd_step_is_lr_times_gradient() {
        let mut p = vec![1.0, 2.0];
        run(OptimizerKind::Sgd, 0.5, 0.0, &mut p, &[0.2, -4.0]);
        assert_eq!(p, vec![0.9, 4.0]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![1.0];
        run(OptimizerKind::AdamW, 0.1, 0.0, &mut p, &[1.0]);
        // m̂ = v̂ = 1, so the step is lr / (1 + ε)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut p = vec![2.0];
        run(OptimizerKind::AdamW, 0.1, 0.5, &mut p, &[0.0]);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let mut p = vec![1.0, 2.0];
        assert!(opt.step(&mut [&mut p], &[&[1.0]]).is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
        opt.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
        let mut q = vec![1.0];
        assert!(opt.step(&mut [&mut q], &[&[1.0]]).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Optimizer::new(OptimizerConfig { lr: -1.0, ..Default::default() }).is_err());
        assert!(Optimizer::new(OptimizerConfig { beta1: 1.0, ..Default::default() }).is_err());
    }
}
