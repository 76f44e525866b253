//! Causal streaming evaluation: predict each target from the state through
//! the previous step, score it, then absorb the observation without gradients.

use std::collections::VecDeque;
use std::time::Instant;

use crate::baselines::StaticModel;
use crate::data::StreamStep;
use crate::error::{LtError, Result};
use crate::metrics::MetricSeries;
use crate::mixture::Mixture;
use crate::model::{FilterState, SequentialModel};
use crate::rng::{rng_for, tag, StepRng};
use crate::training::{beta_schedule, recency_weights};

/// A model under evaluation together with its carried state.
pub trait Forecaster {
    fn predict(&mut self, x: &[f64], k: usize, rng: &mut StepRng) -> Result<Mixture>;
    fn observe(&mut self, step: &StreamStep, k: usize, rng: &mut StepRng) -> Result<()>;
    /// Serialized carried state.
    fn state_bytes(&self) -> Vec<u8>;
}

/// Sequential model with its filter state.
pub struct Filter<'a> {
    pub model: &'a dyn SequentialModel,
    pub state: FilterState,
}

impl<'a> Filter<'a> {
    pub fn new(model: &'a dyn SequentialModel) -> Self {
        Self {
            state: model.initial_state(),
            model,
        }
    }
}

impl Forecaster for Filter<'_> {
    fn predict(&mut self, x: &[f64], k: usize, rng: &mut StepRng) -> Result<Mixture> {
        self.model.predict(&self.state, x, k, rng)
    }

    fn observe(&mut self, step: &StreamStep, k: usize, rng: &mut StepRng) -> Result<()> {
        self.state = self.model.observe(&self.state, step, k, rng)?;
        Ok(())
    }

    fn state_bytes(&self) -> Vec<u8> {
        self.state.to_bytes()
    }
}

/// Settings for continuing sliding-window updates during evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineUpdates {
    pub window: usize,
    pub stride: usize,
    pub lambda: f64,
    pub beta_max: f64,
    pub beta_warmup: u64,
    /// Updates already taken during training (continues the β ramp).
    pub updates_done: u64,
    pub n_train: usize,
    pub seed: u64,
}

/// Static model; frozen unless `online` is set, in which case it refits on
/// the most recent `W` observations every `S` steps.
pub struct StaticForecaster<'a> {
    pub model: &'a mut dyn StaticModel,
    pub online: Option<OnlineUpdates>,
    buffer: VecDeque<StreamStep>,
    seen: usize,
}

impl<'a> StaticForecaster<'a> {
    pub fn new(model: &'a mut dyn StaticModel, online: Option<OnlineUpdates>) -> Self {
        Self {
            model,
            online,
            buffer: VecDeque::new(),
            seen: 0,
        }
    }
}

impl Forecaster for StaticForecaster<'_> {
    fn predict(&mut self, x: &[f64], k: usize, rng: &mut StepRng) -> Result<Mixture> {
        self.model.predict(x, k, rng)
    }

    fn observe(&mut self, step: &StreamStep, _k: usize, _rng: &mut StepRng) -> Result<()> {
        let Some(on) = self.online else {
            return Ok(());
        };
        if self.buffer.len() == on.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(step.clone());
        self.seen += 1;
        if self.seen % on.stride == 0 {
            let window: Vec<StreamStep> = self.buffer.iter().cloned().collect();
            let taus: Vec<usize> = (0..window.len()).collect();
            let weights = recency_weights(window.len() - 1, &taus, on.lambda);
            let u = on.updates_done + (self.seen / on.stride) as u64 - 1;
            let beta = beta_schedule(u, on.beta_warmup, on.beta_max);
            let mut rng = rng_for(on.seed, &[tag::STATIC, u64::MAX, step.t as u64]);
            self.model
                .fit_window(&window, &weights, beta / on.n_train.max(1) as f64, &mut rng)?;
        }
        Ok(())
    }

    fn state_bytes(&self) -> Vec<u8> {
        self.buffer
            .iter()
            .flat_map(|s| s.x.iter().chain([&s.y]).flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Absorbs a prefix (typically the training split) to reach the state at its end.
pub fn warm_up(f: &mut dyn Forecaster, steps: &[StreamStep], k: usize, seed: u64) -> Result<()> {
    for step in steps {
        let mut rng = rng_for(seed, &[tag::WARMUP, step.t as u64]);
        f.observe(step, k, &mut rng)?;
    }
    Ok(())
}

/// Predicts, scores and then observes every step in order. Noise for step
/// `t` comes from `(seed, EVAL, t)`, so a prediction depends only on data
/// before `t`.
pub fn stream_evaluate(f: &mut dyn Forecaster, steps: &[StreamStep], k: usize, seed: u64) -> Result<MetricSeries> {
    let mut series = MetricSeries::default();
    let mut prev: Option<usize> = None;
    for step in steps {
        if let Some(p) = prev {
            if step.t <= p {
                return Err(LtError::OutOfOrder { prev: p, got: step.t });
            }
        }
        prev = Some(step.t);
        let mut rng = rng_for(seed, &[tag::EVAL, step.t as u64, 0]);
        let mix = f.predict(&step.x, k, &mut rng)?;
        series.push(step.t, step.y, &mix);
        let mut rng = rng_for(seed, &[tag::EVAL, step.t as u64, 1]);
        f.observe(step, k, &mut rng)?;
    }
    series.set_manifest("k_eval", k);
    Ok(series)
}

/// State footprint and per-step latency measured around one horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostPoint {
    pub t: usize,
    pub state_bytes: usize,
    /// Median wall time of one predict-and-observe step near `t`.
    pub step_secs: f64,
    /// Steps absorbed when the footprint was taken.
    pub steps_seen: usize,
}

/// Runs predict-then-observe over `steps`; at each horizon `h` records the
/// state size after `h` steps and the median latency of the `probe` steps
/// ending there.
pub fn per_step_cost_probe(
    f: &mut dyn Forecaster,
    steps: &[StreamStep],
    horizons: &[usize],
    k: usize,
    probe: usize,
) -> Result<Vec<CostPoint>> {
    let mut out = Vec::with_capacity(horizons.len());
    let mut times = Vec::with_capacity(steps.len());
    for (i, step) in steps.iter().enumerate() {
        let mut rng = rng_for(0, &[tag::EVAL, i as u64]);
        let start = Instant::now();
        f.predict(&step.x, k, &mut rng)?;
        f.observe(step, k, &mut rng)?;
        times.push(start.elapsed().as_secs_f64());
        let seen = i + 1;
        if horizons.contains(&seen) {
            let mut window: Vec<f64> = times[seen.saturating_sub(probe)..].to_vec();
            window.sort_by(f64::total_cmp);
            out.push(CostPoint {
                t: seen,
                state_bytes: f.state_bytes().len(),
                step_secs: window[window.len() / 2],
                steps_seen: seen,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{Ensemble, StaticOptim};
    use crate::data::{synth_stream, SynthKind, SynthOptions};
    use crate::latent::{LtDims, LtModel, LtVariant};
    use crate::nn::{gaussian_nll_value, LN_2PI};

    /// Emits `N(y_t, 1)` by peeking at a table of targets keyed by step.
    struct Oracle(Vec<f64>, usize);

    impl Forecaster for Oracle {
        fn predict(&mut self, _x: &[f64], _k: usize, _rng: &mut StepRng) -> Result<Mixture> {
            Ok(Mixture::single(self.0[self.1], 0.0))
        }
        fn observe(&mut self, _s: &StreamStep, _k: usize, _rng: &mut StepRng) -> Result<()> {
            self.1 += 1;
            Ok(())
        }
        fn state_bytes(&self) -> Vec<u8> {
            Vec::new()
        }
    }

    fn steps(n: usize) -> Vec<StreamStep> {
        synth_stream(&SynthOptions::new(SynthKind::RegimeSwitch, n, 5)).unwrap().steps
    }

    fn lt() -> LtModel {
        LtModel::new(
            LtVariant::Structured,
            LtDims {
                x_dim: 2,
                embed: 4,
                hidden: 6,
                latent: 2,
                predictor_hidden: 3,
            },
            1,
        )
    }

    #[test]
    fn perfect_oracle_scores() {
        let s = steps(20);
        let mut o = Oracle(s.iter().map(|s| s.y).collect(), 0);
        let m = stream_evaluate(&mut o, &s, 1, 0).unwrap();
        assert!(m.nll.iter().all(|v| (v - 0.5 * LN_2PI).abs() < 1e-15));
        assert!(m.mse.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_component_nll_is_gaussian_nll() {
        let mix = Mixture::single(0.3, -0.7);
        assert_eq!(mix.nll(1.1), gaussian_nll_value(1.1, 0.3, -0.7));
    }

    #[test]
    fn out_of_order_rejected() {
        let mut s = steps(5);
        s.swap(2, 3);
        let mut o = Oracle(vec![0.0; 5], 0);
        assert!(matches!(
            stream_evaluate(&mut o, &s, 1, 0),
            Err(LtError::OutOfOrder { prev: 3, got: 2 })
        ));
    }

    #[test]
    fn future_mutation_leaves_past_predictions() {
        let m = lt();
        let s = steps(40);
        let base = stream_evaluate(&mut Filter::new(&m), &s, 10, 3).unwrap();
        let mut mutated = s.clone();
        for st in &mut mutated[25..] {
            st.y += 100.0;
            st.x[0] = -st.x[0];
        }
        let other = stream_evaluate(&mut Filter::new(&m), &mutated, 10, 3).unwrap();
        assert_eq!(base.mean[..25], other.mean[..25]);
        assert_eq!(base.nll[..25], other.nll[..25]);
        assert_ne!(base.nll[30], other.nll[30]);
    }

    #[test]
    fn filter_state_size_is_constant() {
        let m = lt();
        let s = steps(300);
        let mut f = Filter::new(&m);
        let pts = per_step_cost_probe(&mut f, &s, &[10, 100, 300], 5, 10).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts.iter().all(|p| p.state_bytes == pts[0].state_bytes));
        assert_eq!(pts.iter().map(|p| p.steps_seen).collect::<Vec<_>>(), vec![10, 100, 300]);
        assert_eq!(f.state.t, 300);
    }

    #[test]
    fn online_static_updates_change_predictions() {
        let s = steps(40);
        let mut a = Ensemble::new(2, vec![4], 2, StaticOptim { lr: 1e-2, clip: 1.0 }, 0);
        let mut b = a.clone();
        let frozen = stream_evaluate(&mut StaticForecaster::new(&mut a, None), &s, 1, 0).unwrap();
        let on = OnlineUpdates {
            window: 16,
            stride: 4,
            lambda: 0.9,
            beta_max: 1.0,
            beta_warmup: 10,
            updates_done: 0,
            n_train: 40,
            seed: 0,
        };
        let online = stream_evaluate(&mut StaticForecaster::new(&mut b, Some(on)), &s, 1, 0).unwrap();
        assert_eq!(frozen.mean[..4], online.mean[..4]);
        assert_ne!(frozen.mean[5], online.mean[5]);
    }
}
