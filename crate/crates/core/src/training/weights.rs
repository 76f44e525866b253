/// `w_τ = λ^{t−τ}` for each `τ ≤ t`.
pub fn recency_weights(t: usize, taus: &[usize], lambda: f64) -> Vec<f64> {
    taus.iter()
        .map(|&tau| {
            assert!(tau <= t, "weight requested for a future step");
            lambda.powi((t - tau) as i32)
        })
        .collect()
}

/// `w_τ · exp(α [NLL_τ − EMA_τ]₊)`.
pub fn surprise_weights(base: &[f64], nll: &[f64], ema: &[f64], alpha: f64) -> Vec<f64> {
    base.iter()
        .zip(nll.iter().zip(ema))
        .map(|(&w, (&n, &e))| w * surprise_factor(n, e, alpha))
        .collect()
}

fn surprise_factor(nll: f64, ema: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    let excess = (nll - ema).max(0.0);
    if excess.is_finite() {
        (alpha * excess).exp()
    } else {
        1.0
    }
}

/// `β = β_max · min(1, u / warmup)`.
pub fn beta_schedule(update: u64, warmup: u64, beta_max: f64) -> f64 {
    if warmup == 0 {
        return beta_max;
    }
    beta_max * (update as f64 / warmup as f64).min(1.0)
}

/// Running EMA of per-step NLL, producing one surprise factor per new step.
#[derive(Debug, Clone, PartialEq)]
pub struct Surprise {
    pub alpha: f64,
    pub decay: f64,
    pub ema: Option<f64>,
}

impl Surprise {
    pub fn new(alpha: f64, decay: f64) -> Self {
        Self {
            alpha,
            decay,
            ema: None,
        }
    }

    /// Factor against the EMA of earlier steps, then folds `nll` into the EMA.
    pub fn observe(&mut self, nll: f64) -> f64 {
        let factor = self.ema.map_or(1.0, |e| surprise_factor(nll, e, self.alpha));
        if nll.is_finite() {
            self.ema = Some(match self.ema {
                None => nll,
                Some(e) => self.decay * e + (1.0 - self.decay) * nll,
            });
        }
        factor
    }
}
