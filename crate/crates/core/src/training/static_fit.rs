use std::time::Instant;

use super::log::{LogRecord, TrainReport};
use super::weights::{beta_schedule, recency_weights};
use super::TrainConfig;
use crate::baselines::StaticModel;
use crate::data::StreamStep;
use crate::error::{invalid, Result};
use crate::rng::{rng_for, tag};

/// Inclusive `(start, end)` index pairs of the sliding windows: one ending
/// every `stride` steps plus one at the last step, each at most `window` long.
pub fn static_windows(len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut ends: Vec<usize> = (1..=len / stride).map(|i| i * stride - 1).collect();
    if len > 0 && ends.last() != Some(&(len - 1)) {
        ends.push(len - 1);
    }
    ends.into_iter()
        .map(|e| ((e + 1).saturating_sub(window), e))
        .collect()
}

/// Sliding-window fitting with recency weights; `β` ramps over
/// `beta_warmup_static` updates and the weight KL is scaled by `1/N`.
pub fn train_static(
    model: &mut dyn StaticModel,
    stream: &[StreamStep],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(invalid("training stream is empty"));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let n = stream.len() as f64;
    let windows = static_windows(stream.len(), cfg.window, cfg.stride);
    for epoch in 0..cfg.epochs {
        for &(a, e) in &windows {
            let beta = beta_schedule(report.updates, cfg.beta_warmup_static, cfg.beta_max);
            let taus: Vec<usize> = (a..=e).collect();
            let weights = recency_weights(e, &taus, cfg.lambda);
            let mut rng = rng_for(cfg.seed, &[tag::STATIC, epoch as u64, e as u64]);
            let r = model.fit_window(&stream[a..=e], &weights, beta / n, &mut rng)?;
            report.step_losses.push(r.loss);
            if r.applied {
                report.updates += 1;
            } else {
                report.skipped += 1;
            }
            report.log.push(LogRecord {
                step: e,
                epoch,
                elbo: -r.loss,
                nll: r.nll,
                kl: r.kl,
                beta,
                grad_norm: Some(r.grad_norm),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{Ensemble, StaticOptim};
    use crate::data::{synth_stream, SynthKind, SynthOptions};

    #[test]
    fn windows_cover_stream_with_partial_prefix() {
        assert_eq!(
            static_windows(10, 4, 3),
            vec![(0, 2), (2, 5), (5, 8), (6, 9)]
        );
        assert_eq!(static_windows(6, 8, 3), vec![(0, 2), (0, 5)]);
        assert_eq!(static_windows(2, 8, 5), vec![(0, 1)]);
        assert!(static_windows(0, 8, 5).is_empty());
    }

    #[test]
    fn updates_once_per_window_per_epoch() {
        let s = synth_stream(&SynthOptions::new(SynthKind::SeasonalDrift, 100, 1)).unwrap().steps;
        let mut m = Ensemble::new(3, vec![4], 2, StaticOptim { lr: 1e-2, clip: 1.0 }, 0);
        let cfg = TrainConfig {
            window: 16,
            stride: 8,
            epochs: 2,
            ..TrainConfig::default()
        };
        let r = train_static(&mut m, &s, &cfg).unwrap();
        let per_epoch = static_windows(100, 16, 8).len();
        assert_eq!(r.updates as usize, 2 * per_epoch);
        assert_eq!(r.log.len(), 2 * per_epoch);
    }
}
