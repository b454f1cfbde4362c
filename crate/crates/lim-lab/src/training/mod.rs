//! Optimization: AdamW with decoupled weight decay, the two training
//! procedures (backbone pretraining on paired data, imagination-module
//! training through the frozen backbone), and checkpoint I/O.

mod checkpoint;
mod loops;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointContents};
pub use loops::{
    lim_batch_gradients, mse_mean_collapse_probe, pretrain_backbone, train_lim,
    train_lim_mse, MeanCollapseProbe, TrainLog,
};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Answer negative log-likelihood through the frozen backbone.
    Nll,
    /// Mean squared error against the oracle image embeddings — the
    /// regression alternative, kept for comparison.
    MseToOracle,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Nll => "nll",
            Objective::MseToOracle => "mse_to_oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Objective> {
        match s {
            "nll" => Ok(Objective::Nll),
            "mse_to_oracle" | "mse" => Ok(Objective::MseToOracle),
            other => Err(Error::Config(format!(
                "unknown objective '{other}' (expected nll or mse_to_oracle)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    /// Imagination-module training defaults.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            objective: Objective::Nll,
        }
    }
}

impl TrainConfig {
    /// Backbone pretraining defaults: same optimizer family, more epochs and
    /// a larger step size (the backbone is trained from scratch, not tuned).
    pub fn backbone_default() -> Self {
        TrainConfig { learning_rate: 1e-3, epochs: 20, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay. The decay is applied together with the
/// moment-based step:
///
/// ```text
/// m ← β₁·m + (1−β₁)·g        v ← β₂·v + (1−β₂)·g²
/// m̂ = m/(1−β₁ᵗ)              v̂ = v/(1−β₂ᵗ)
/// p ← p − lr·( m̂/(√v̂ + ε) + λ·p )
/// ```
///
/// The decay never enters the reported loss; logs show the raw objective.
pub struct AdamW<S> {
    lr: S,
    wd: S,
    beta1: S,
    beta2: S,
    eps: S,
    m: Vec<Matrix<S>>,
    v: Vec<Matrix<S>>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: &TrainConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            lr: S::of(config.learning_rate),
            wd: S::of(config.weight_decay),
            beta1: S::of(config.beta1),
            beta2: S::of(config.beta2),
            eps: S::of(config.eps),
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over aligned parameter/gradient lists.
    pub fn step(&mut self, params: &mut [&mut Matrix<S>], grads: &[Matrix<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = S::one() - self.beta1.powi(self.t as i32);
        let bc2 = S::one() - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != self.m[i].shape() || grads[i].shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "optimizer slot {i}: state {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    grads[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                m[j] = self.beta1 * m[j] + (S::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (S::one() - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] = pd[j] - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.wd * pd[j]);
            }
        }
        Ok(())
    }
}
