//! Equal-weight Gaussian mixtures formed from K predictive components.

use statrs::function::erf::erfc;

use crate::nn::LN_2PI;

/// Moments of a predictive mixture, split into aleatoric and epistemic parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSummary {
    pub mean: f64,
    pub var_aleatoric: f64,
    pub var_epistemic: f64,
    pub var_total: f64,
}

/// `(1/K) Σ_k N(y; mean_k, var_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub means: Vec<f64>,
    pub logvars: Vec<f64>,
}

impl Mixture {
    pub fn new(means: Vec<f64>, logvars: Vec<f64>) -> Self {
        assert_eq!(means.len(), logvars.len());
        assert!(!means.is_empty(), "mixture needs at least one component");
        Self { means, logvars }
    }

    pub fn single(mean: f64, logvar: f64) -> Self {
        Self::new(vec![mean], vec![logvar])
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Mixture mean, mean component variance, and population variance of the
    /// component means. Total is their sum.
    pub fn summary(&self) -> MixtureSummary {
        let k = self.means.len() as f64;
        // Deviations from the first component keep identical means exact.
        let m0 = self.means[0];
        let shift = self.means.iter().map(|m| m - m0).sum::<f64>() / k;
        let mean = m0 + shift;
        let var_aleatoric = self.logvars.iter().map(|lv| lv.exp()).sum::<f64>() / k;
        let var_epistemic = self
            .means
            .iter()
            .map(|m| (m - m0 - shift).powi(2))
            .sum::<f64>()
            / k;
        MixtureSummary {
            mean,
            var_aleatoric,
            var_epistemic,
            var_total: var_aleatoric + var_epistemic,
        }
    }

    /// `−log((1/K) Σ_k N(y; μ_k, σ²_k))` via log-sum-exp.
    pub fn nll(&self, y: f64) -> f64 {
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&self.logvars)
            .map(|(m, lv)| -0.5 * (LN_2PI + lv + (y - m).powi(2) * (-lv).exp()))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return -max;
        }
        let s: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        -(max + s.ln() - (logs.len() as f64).ln())
    }

    /// Mixture CDF at `y`.
    pub fn cdf(&self, y: f64) -> f64 {
        let s: f64 = self
            .means
            .iter()
            .zip(&self.logvars)
            .map(|(m, lv)| {
                let sd = (0.5 * lv).exp();
                0.5 * erfc(-(y - m) / (sd * std::f64::consts::SQRT_2))
            })
            .sum();
        (s / self.means.len() as f64).clamp(0.0, 1.0)
    }
}
