//! Online training: credit weighting, KL annealing, the three truncated
//! backpropagation schedules for sequential models, and sliding-window
//! fitting for static baselines.

mod log;
mod sequential;
mod static_fit;
mod weights;

use std::fmt;
use std::str::FromStr;

pub use log::{write_log, LogRecord, TrainReport, LOG_SCHEMA};
pub use sequential::{train_approx_stride, train_chunk_stride, train_exact_rolling, train_sequential};
pub use static_fit::{static_windows, train_static};
pub use weights::{beta_schedule, recency_weights, surprise_weights, Surprise};

use crate::error::{LtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    ExactRolling,
    ChunkStride,
    ApproxStride,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Self::ExactRolling, Self::ChunkStride, Self::ApproxStride];

    pub fn name(self) -> &'static str {
        match self {
            Self::ExactRolling => "exact_rolling",
            Self::ChunkStride => "chunk_stride",
            Self::ApproxStride => "approx_stride",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = LtError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LtError::Config(format!("unknown algorithm `{s}`")))
    }
}

/// Optimization and credit-assignment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub window: usize,
    pub stride: usize,
    /// Recency decay λ ∈ (0, 1].
    pub lambda: f64,
    /// Surprise gain α ≥ 0; zero disables surprise weighting.
    pub surprise_alpha: f64,
    pub surprise_decay: f64,
    pub beta_max: f64,
    /// Optimizer updates over which β ramps up for sequential models.
    pub beta_warmup: u64,
    /// Ramp length for static models.
    pub beta_warmup_static: u64,
    pub k_train: usize,
    pub epochs: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub lr: f64,
    pub grad_clip: f64,
    /// Replace the stored state with the recomputed one after each exact-rolling update.
    pub detach_checkpoint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 256,
            stride: 32,
            lambda: 0.9,
            surprise_alpha: 0.0,
            surprise_decay: 0.99,
            beta_max: 1.0,
            beta_warmup: 575,
            beta_warmup_static: 4600,
            k_train: 1,
            epochs: 6,
            seed: 0,
            algorithm: Algorithm::ChunkStride,
            lr: 1e-4,
            grad_clip: 1.0,
            detach_checkpoint: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LtError::Config(msg.to_string()));
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda must lie in (0, 1]");
        }
        if !(self.surprise_alpha >= 0.0 && self.surprise_alpha.is_finite()) {
            return bad("surprise_alpha must be finite and non-negative");
        }
        if !(self.surprise_decay > 0.0 && self.surprise_decay < 1.0) {
            return bad("surprise_decay must lie in (0, 1)");
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return bad("beta_max must be finite and non-negative");
        }
        if self.k_train == 0 {
            return bad("k_train must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !self.grad_clip.is_finite() {
            return bad("grad_clip must be finite");
        }
        Ok(())
    }

    /// Optimizer updates one sequential epoch over `n` steps performs.
    pub fn sequential_updates_per_epoch(&self, n: usize) -> usize {
        let (w, s) = (self.window, self.stride);
        match self.algorithm {
            Algorithm::ChunkStride => n.div_ceil(w),
            Algorithm::ExactRolling => static_windows(n, w, s).len(),
            Algorithm::ApproxStride => (0..n)
                .step_by(w)
                .map(|t0| (n - t0).min(w).min(w - 1) / s + 1)
                .sum(),
        }
    }

    /// Optimizer updates one static epoch over `n` steps performs.
    pub fn static_updates_per_epoch(&self, n: usize) -> usize {
        static_windows(n, self.window, self.stride).len()
    }

    /// Re-paces the schedule for a training split of `n` steps so that it
    /// progresses per epoch as the reference protocol does: each β warmup
    /// spans the same number of epochs, and the learning rate is scaled so
    /// that `lr × updates per epoch` matches the reference.
    pub fn rescaled(&self, n: usize) -> TrainConfig {
        let reference = TrainConfig::default();
        let seq = self.sequential_updates_per_epoch(n).max(1) as f64;
        let stat = self.static_updates_per_epoch(n).max(1) as f64;
        let epochs = REFERENCE_WARMUP_EPOCHS;
        TrainConfig {
            lr: reference.lr * (reference.beta_warmup as f64 / epochs) / seq,
            beta_warmup: (epochs * seq).round() as u64,
            beta_warmup_static: (epochs * stat).round() as u64,
            ..self.clone()
        }
    }
}

/// Epochs the reference β warmups span, for both update cadences.
pub const REFERENCE_WARMUP_EPOCHS: f64 = 3.0;
