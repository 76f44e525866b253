use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use super::StreamStep;
use crate::error::{invalid, LtError, Result};
use crate::rng::{normals, rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthKind {
    RegimeSwitch,
    SeasonalDrift,
    AnomalySpike,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [Self::RegimeSwitch, Self::SeasonalDrift, Self::AnomalySpike];

    pub fn name(self) -> &'static str {
        match self {
            Self::RegimeSwitch => "regime_switch",
            Self::SeasonalDrift => "seasonal_drift",
            Self::AnomalySpike => "anomaly_spike",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = LtError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown synthetic stream `{s}`")))
    }
}

/// Coefficient sets cycled through by the regime-switch stream.
pub const REGIME_COEFFS: [[f64; 2]; 3] = [[1.0, -0.5], [-0.8, 0.6], [0.3, 1.2]];
/// Offsets added per regime so regimes also differ in level.
pub const REGIME_OFFSETS: [f64; 3] = [0.0, 1.5, -1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub length: usize,
    pub seed: u64,
    pub noise: f64,
    /// Number of regime changes over the stream (regime_switch).
    pub switches: usize,
    /// Seasonal period in steps (seasonal_drift).
    pub period: f64,
    /// Injected spike position; `None` places it at 85% of the stream.
    pub anomaly_index: Option<usize>,
    /// Added to the target at the anomaly index, in units of the target noise scale.
    pub spike: f64,
    /// Opposite-signed offset applied to the two covariates at the anomaly index.
    pub covariate_shift: f64,
}

impl SynthOptions {
    pub fn new(kind: SynthKind, length: usize, seed: u64) -> Self {
        Self {
            kind,
            length,
            seed,
            noise: 0.3,
            switches: 5,
            period: 100.0,
            anomaly_index: None,
            spike: 40.0,
            covariate_shift: 50.0,
        }
    }
}

/// Generated stream with the ground-truth annotations tests need.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStream {
    pub kind: SynthKind,
    pub seed: u64,
    pub steps: Vec<StreamStep>,
    /// Regime in force at each step (all zeros for single-regime streams).
    pub regimes: Vec<usize>,
    pub anomaly_index: Option<usize>,
}

impl SynthStream {
    pub fn switch_points(&self) -> Vec<usize> {
        (1..self.regimes.len())
            .filter(|&t| self.regimes[t] != self.regimes[t - 1])
            .collect()
    }
}

pub fn synth_stream(opts: &SynthOptions) -> Result<SynthStream> {
    let n = opts.length;
    if n == 0 {
        return Err(invalid("synthetic stream length must be ≥ 1"));
    }
    let mut rng = rng_for(opts.seed, &[tag::DATA, opts.kind as u64]);
    let mut steps = Vec::with_capacity(n);
    let mut regimes = vec![0; n];
    let mut anomaly_index = None;
    match opts.kind {
        SynthKind::RegimeSwitch => {
            let seg = n.div_ceil(opts.switches + 1).max(1);
            for t in 0..n {
                let r = (t / seg) % REGIME_COEFFS.len();
                regimes[t] = r;
                let x = normals(&mut rng, 2);
                let eps = normals(&mut rng, 1)[0];
                let a = REGIME_COEFFS[r];
                let y = a[0] * x[0] + a[1] * x[1] + REGIME_OFFSETS[r] + opts.noise * eps;
                steps.push(StreamStep { t, x, y });
            }
        }
        SynthKind::SeasonalDrift => {
            for t in 0..n {
                let u = normals(&mut rng, 1)[0];
                let eps = normals(&mut rng, 1)[0];
                let angle = TAU * t as f64 / opts.period;
                // Phase rotates one full turn across the stream.
                let phase = TAU * t as f64 / n as f64;
                let amp = 1.0 + 0.5 * (TAU * t as f64 / (3.0 * n as f64)).sin();
                let y = amp * (angle + phase).sin() + 0.5 * u + opts.noise * eps;
                steps.push(StreamStep {
                    t,
                    x: vec![u, angle.sin(), angle.cos()],
                    y,
                });
            }
        }
        SynthKind::AnomalySpike => {
            let idx = opts
                .anomaly_index
                .unwrap_or((0.85 * n as f64).floor() as usize)
                .min(n - 1);
            anomaly_index = Some(idx);
            let a = REGIME_COEFFS[0];
            for t in 0..n {
                let mut x = normals(&mut rng, 2);
                let eps = normals(&mut rng, 1)[0];
                let wobble = 0.3 * (TAU * t as f64 / 250.0).sin();
                let mut y = a[0] * x[0] + a[1] * x[1] + wobble + opts.noise * eps;
                if t == idx {
                    x[0] += opts.covariate_shift;
                    x[1] -= opts.covariate_shift;
                    y += opts.spike * opts.noise.max(0.1);
                }
                steps.push(StreamStep { t, x, y });
            }
        }
    }
    Ok(SynthStream {
        kind: opts.kind,
        seed: opts.seed,
        steps,
        regimes,
        anomaly_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_determinism() {
        for kind in SynthKind::ALL {
            let a = synth_stream(&SynthOptions::new(kind, 300, 9)).unwrap();
            let b = synth_stream(&SynthOptions::new(kind, 300, 9)).unwrap();
            let c = synth_stream(&SynthOptions::new(kind, 300, 10)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.steps, c.steps);
        }
    }

    #[test]
    fn anomaly_index_is_recorded() {
        let mut o = SynthOptions::new(SynthKind::AnomalySpike, 500, 1);
        o.anomaly_index = Some(321);
        let s = synth_stream(&o).unwrap();
        assert_eq!(s.anomaly_index, Some(321));
        let peak = s
            .steps
            .iter()
            .max_by(|a, b| a.y.abs().total_cmp(&b.y.abs()))
            .unwrap();
        assert_eq!(peak.t, 321);
    }

    #[test]
    fn zero_noise_regimes_are_exact() {
        let mut o = SynthOptions::new(SynthKind::RegimeSwitch, 600, 4);
        o.noise = 0.0;
        let s = synth_stream(&o).unwrap();
        for (st, &r) in s.steps.iter().zip(&s.regimes) {
            let a = REGIME_COEFFS[r];
            assert_eq!(st.y, a[0] * st.x[0] + a[1] * st.x[1] + REGIME_OFFSETS[r]);
        }
        assert_eq!(s.switch_points(), vec![100, 200, 300, 400, 500]);
    }

    #[test]
    fn five_switches_over_five_thousand() {
        let s = synth_stream(&SynthOptions::new(SynthKind::RegimeSwitch, 5000, 0)).unwrap();
        assert_eq!(s.switch_points().len(), 5);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SynthKind::ALL {
            assert_eq!(k.name().parse::<SynthKind>().unwrap(), k);
        }
        assert!("bogus".parse::<SynthKind>().is_err());
    }

    #[test]
    fn zero_length_rejected() {
        assert!(synth_stream(&SynthOptions::new(SynthKind::SeasonalDrift, 0, 0)).is_err());
    }
}
