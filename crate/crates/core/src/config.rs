//! Experiment configuration: a flat `key = value` text format with `#`
//! comment lines, resolved from defaults, an optional file and overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::budget::{BudgetTargets, FixedDims};
use crate::data::{StreamOptions, SynthKind, SynthOptions};
use crate::error::{LtError, Result};
use crate::inference::OnlineUpdates;
use crate::metrics::FigureOptions;
use crate::model::ModelKind;
use crate::training::TrainConfig;

pub const CONFIG_FORMAT: &str = "latenttrack.config/1";

/// Keys that do not change results and are left out of the hash.
pub const UNHASHED_KEYS: [&str; 3] = ["out", "jobs", "seeds"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Jena,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Jena => "jena",
        }
    }
}

impl FromStr for DataSource {
    type Err = LtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Self::Synth),
            "jena" => Ok(Self::Jena),
            _ => Err(LtError::Config(format!("unknown data source `{s}`"))),
        }
    }
}

/// Ordered seed list; written as `a..b` (inclusive) when contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

impl FromStr for Seeds {
    type Err = LtError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || LtError::Config(format!("bad seed list `{s}`; use `a..b` or `a,b,c`"));
        let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if b < a {
                return Err(bad());
            }
            (a..=b).collect()
        } else {
            s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if seeds.is_empty() || sorted.len() != seeds.len() {
            return Err(bad());
        }
        Ok(Self(seeds))
    }
}

impl std::fmt::Display for Seeds {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = &self.0;
        if v.len() > 1 && v.windows(2).all(|w| w[1] == w[0] + 1) {
            write!(f, "{}..{}", v[0], v[v.len() - 1])
        } else {
            let parts: Vec<String> = v.iter().map(u64::to_string).collect();
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub synth_kind: SynthKind,
    pub synth_length: usize,
    pub synth_seed: u64,
    pub synth_noise: f64,
    pub synth_switches: usize,
    /// `None` uses the generator's default position.
    pub synth_anomaly_index: Option<usize>,
    pub jena_path: Option<PathBuf>,
    pub jena_delimiter: u8,
    /// Keep every n-th source record.
    pub downsample: usize,
    /// Cadence of the source file.
    pub source_step_minutes: f64,
    pub history: usize,
    pub horizon: usize,
    pub target: String,
    pub train_fraction: f64,

    pub models: Vec<ModelKind>,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub ensemble_members: usize,
    pub dropout: f64,

    /// Training settings; `seed` is overwritten per run.
    pub train: TrainConfig,
    pub k_eval: usize,
    /// Keep refitting static baselines on the evaluation stream.
    pub static_online: bool,
    /// Re-pace lr and β warmups to the training split's length.
    pub rescale_schedule: bool,

    /// `None` uses each model's reference total.
    pub budget_total: Option<usize>,
    pub budget_total_tol: f64,
    pub budget_inference: usize,
    pub budget_inference_tol: f64,

    pub seeds: Seeds,
    pub out: PathBuf,
    pub jobs: usize,
    pub pit_bins: usize,
    pub calib_bins: usize,
}

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LATENTTRACK_OUT";

impl Default for ExperimentConfig {
    fn default() -> Self {
        let stream = StreamOptions::default();
        let synth = SynthOptions::new(SynthKind::RegimeSwitch, 5000, 0);
        Self {
            data: DataSource::Synth,
            synth_kind: synth.kind,
            synth_length: synth.length,
            synth_seed: synth.seed,
            synth_noise: synth.noise,
            synth_switches: synth.switches,
            synth_anomaly_index: synth.anomaly_index,
            jena_path: None,
            jena_delimiter: b',',
            downsample: 36,
            source_step_minutes: 10.0,
            history: stream.history,
            horizon: stream.horizon,
            target: stream.target,
            train_fraction: stream.train_fraction,
            models: ModelKind::ALL.to_vec(),
            latent_dim: 8,
            hidden_dim: 64,
            ensemble_members: 10,
            dropout: 0.1,
            train: TrainConfig::default(),
            k_eval: 100,
            static_online: false,
            rescale_schedule: false,
            budget_total: None,
            budget_total_tol: 0.10,
            budget_inference: 20_000,
            budget_inference_tol: 0.05,
            seeds: Seeds((0..25).collect()),
            out: std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
            jobs: 1,
            pit_bins: 20,
            calib_bins: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LtError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(LtError::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let models: Vec<&str> = self.models.iter().map(|m| m.name()).collect();
        let delimiter = match self.jena_delimiter {
            b'\t' => "tab".to_string(),
            d => (d as char).to_string(),
        };
        vec![
            ("data", self.data.name().into()),
            ("synth_kind", self.synth_kind.name().into()),
            ("synth_length", self.synth_length.to_string()),
            ("synth_seed", self.synth_seed.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
            ("synth_switches", self.synth_switches.to_string()),
            ("synth_anomaly_index", auto(&self.synth_anomaly_index)),
            ("jena_path", self.jena_path.as_ref().map_or_else(String::new, |p| p.display().to_string())),
            ("jena_delimiter", delimiter),
            ("downsample", self.downsample.to_string()),
            ("source_step_minutes", self.source_step_minutes.to_string()),
            ("history", self.history.to_string()),
            ("horizon", self.horizon.to_string()),
            ("target", self.target.clone()),
            ("train_fraction", self.train_fraction.to_string()),
            ("models", models.join(",")),
            ("latent_dim", self.latent_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("ensemble_members", self.ensemble_members.to_string()),
            ("dropout", self.dropout.to_string()),
            ("algorithm", t.algorithm.name().into()),
            ("window", t.window.to_string()),
            ("stride", t.stride.to_string()),
            ("lambda", t.lambda.to_string()),
            ("surprise_alpha", t.surprise_alpha.to_string()),
            ("surprise_decay", t.surprise_decay.to_string()),
            ("beta_max", t.beta_max.to_string()),
            ("beta_warmup", t.beta_warmup.to_string()),
            ("beta_warmup_static", t.beta_warmup_static.to_string()),
            ("k_train", t.k_train.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("detach_checkpoint", t.detach_checkpoint.to_string()),
            ("k_eval", self.k_eval.to_string()),
            ("static_online", self.static_online.to_string()),
            ("rescale_schedule", self.rescale_schedule.to_string()),
            ("budget_total", auto(&self.budget_total)),
            ("budget_total_tol", self.budget_total_tol.to_string()),
            ("budget_inference", self.budget_inference.to_string()),
            ("budget_inference_tol", self.budget_inference_tol.to_string()),
            ("pit_bins", self.pit_bins.to_string()),
            ("calib_bins", self.calib_bins.to_string()),
            ("seeds", self.seeds.to_string()),
            ("out", self.out.display().to_string()),
            ("jobs", self.jobs.to_string()),
        ]
    }

    /// Sets one key from its text form. Range checks happen in [`Self::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "data" => self.data = v.parse()?,
            "synth_kind" => self.synth_kind = v.parse().map_err(|e: LtError| LtError::Config(e.to_string()))?,
            "synth_length" => self.synth_length = parse(key, v)?,
            "synth_seed" => self.synth_seed = parse(key, v)?,
            "synth_noise" => self.synth_noise = parse(key, v)?,
            "synth_switches" => self.synth_switches = parse(key, v)?,
            "synth_anomaly_index" => self.synth_anomaly_index = parse_auto(key, v)?,
            "jena_path" => self.jena_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "jena_delimiter" => {
                self.jena_delimiter = match v {
                    "tab" => b'\t',
                    _ if v.len() == 1 => v.as_bytes()[0],
                    _ => return Err(LtError::Config(format!("`{key}`: expected one character or `tab`"))),
                }
            }
            "downsample" => self.downsample = parse(key, v)?,
            "source_step_minutes" => self.source_step_minutes = parse(key, v)?,
            "history" => self.history = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "target" => self.target = v.to_string(),
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "models" => {
                self.models = v
                    .split(',')
                    .map(|m| m.trim().parse::<ModelKind>().map_err(|e| LtError::Config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "ensemble_members" => self.ensemble_members = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "algorithm" => t.algorithm = v.parse()?,
            "window" => t.window = parse(key, v)?,
            "stride" => t.stride = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "surprise_alpha" => t.surprise_alpha = parse(key, v)?,
            "surprise_decay" => t.surprise_decay = parse(key, v)?,
            "beta_max" => t.beta_max = parse(key, v)?,
            "beta_warmup" => t.beta_warmup = parse(key, v)?,
            "beta_warmup_static" => t.beta_warmup_static = parse(key, v)?,
            "k_train" => t.k_train = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "detach_checkpoint" => t.detach_checkpoint = parse_bool(key, v)?,
            "k_eval" => self.k_eval = parse(key, v)?,
            "static_online" => self.static_online = parse_bool(key, v)?,
            "rescale_schedule" => self.rescale_schedule = parse_bool(key, v)?,
            "budget_total" => self.budget_total = parse_auto(key, v)?,
            "budget_total_tol" => self.budget_total_tol = parse(key, v)?,
            "budget_inference" => self.budget_inference = parse(key, v)?,
            "budget_inference_tol" => self.budget_inference_tol = parse(key, v)?,
            "pit_bins" => self.pit_bins = parse(key, v)?,
            "calib_bins" => self.calib_bins = parse(key, v)?,
            "seeds" => self.seeds = v.parse()?,
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = parse(key, v)?,
            _ => return Err(LtError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| LtError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| LtError::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k == "format" {
                if v.trim() != CONFIG_FORMAT {
                    return Err(LtError::Config(format!("unsupported format `{}`", v.trim())));
                }
                continue;
            }
            cfg.set(k, v).map_err(|e| LtError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then overrides; validated.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::parse_text(&std::fs::read_to_string(p)?)?,
            None => Self::default(),
        };
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn render(&self) -> String {
        let mut out = format!("format = {CONFIG_FORMAT}\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Content hash over every result-affecting key.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(CONFIG_FORMAT.as_bytes());
        for (k, v) in self.entries() {
            if !UNHASHED_KEYS.contains(&k) {
                h.update(format!("\n{k}={v}").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LtError::Config(msg));
        self.train.validate()?;
        let positive = [
            ("synth_length", self.synth_length),
            ("downsample", self.downsample),
            ("history", self.history),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("ensemble_members", self.ensemble_members),
            ("k_eval", self.k_eval),
            ("budget_inference", self.budget_inference),
            ("pit_bins", self.pit_bins),
            ("calib_bins", self.calib_bins),
            ("jobs", self.jobs),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("`{k}` must be at least 1"));
            }
        }
        if self.budget_total == Some(0) {
            return bad("`budget_total` must be positive".into());
        }
        if !(self.synth_noise >= 0.0 && self.synth_noise.is_finite()) {
            return bad("`synth_noise` must be finite and non-negative".into());
        }
        if !(self.source_step_minutes > 0.0 && self.source_step_minutes.is_finite()) {
            return bad("`source_step_minutes` must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("`train_fraction` must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("`dropout` must lie in [0, 1)".into());
        }
        for (k, v) in [
            ("budget_total_tol", self.budget_total_tol),
            ("budget_inference_tol", self.budget_inference_tol),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("`{k}` must lie in [0, 1)"));
            }
        }
        if let Some(i) = self.synth_anomaly_index {
            if i >= self.synth_length {
                return bad("`synth_anomaly_index` lies past the stream".into());
            }
        }
        if self.models.is_empty() {
            return bad("`models` is empty".into());
        }
        if (1..self.models.len()).any(|i| self.models[..i].contains(&self.models[i])) {
            return bad("`models` lists a model twice".into());
        }
        if self.data == DataSource::Jena && self.jena_path.is_none() {
            return bad("`data = jena` needs `jena_path`".into());
        }
        Ok(())
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            noise: self.synth_noise,
            switches: self.synth_switches,
            anomaly_index: self.synth_anomaly_index,
            ..SynthOptions::new(self.synth_kind, self.synth_length, self.synth_seed)
        }
    }

    /// Spacing of stream steps after downsampling, in minutes.
    pub fn effective_step_minutes(&self) -> f64 {
        self.source_step_minutes * self.downsample as f64
    }

    pub fn stream_options(&self) -> StreamOptions {
        StreamOptions {
            history: self.history,
            horizon: self.horizon,
            target: self.target.clone(),
            train_fraction: self.train_fraction,
            step_minutes: self.effective_step_minutes(),
        }
    }

    /// Training settings for one seed on a training split of `n_train` steps.
    pub fn train_config(&self, seed: u64, n_train: usize) -> TrainConfig {
        let t = if self.rescale_schedule {
            self.train.rescaled(n_train)
        } else {
            self.train.clone()
        };
        TrainConfig { seed, ..t }
    }

    pub fn fixed_dims(&self, x_dim: usize) -> FixedDims {
        FixedDims {
            x_dim,
            hidden: self.hidden_dim,
            latent: self.latent_dim,
            members: self.ensemble_members,
            dropout: self.dropout,
        }
    }

    pub fn budget_targets(&self, kind: ModelKind) -> BudgetTargets {
        BudgetTargets {
            total: self.budget_total.unwrap_or(kind.reference_budget().total),
            total_tol: self.budget_total_tol,
            inference: self.budget_inference,
            inference_tol: self.budget_inference_tol,
        }
    }

    pub fn figure_options(&self) -> FigureOptions {
        FigureOptions {
            pit_bins: self.pit_bins,
            calib_bins: self.calib_bins,
        }
    }

    /// Online settings for static baselines, when enabled.
    pub fn online_updates(&self, seed: u64, updates_done: u64, n_train: usize) -> Option<OnlineUpdates> {
        let t = self.train_config(seed, n_train);
        self.static_online.then_some(OnlineUpdates {
            window: t.window,
            stride: t.stride,
            lambda: t.lambda,
            beta_max: t.beta_max,
            beta_warmup: t.beta_warmup_static,
            updates_done,
            n_train,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let c = ExperimentConfig::parse_text("").unwrap();
        assert_eq!(c.train.window, 256);
        assert_eq!(c.train.stride, 32);
        assert_eq!(c.train.lambda, 0.9);
        assert_eq!(c.latent_dim, 8);
        assert_eq!(c.hidden_dim, 64);
        assert_eq!(c.train.beta_max, 1.0);
        assert_eq!((c.train.beta_warmup, c.train.beta_warmup_static), (575, 4600));
        assert_eq!(c.train.k_train, 1);
        assert_eq!(c.k_eval, 100);
        assert_eq!(c.ensemble_members, 10);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.grad_clip, 1.0);
        assert_eq!(c.train.epochs, 6);
        assert_eq!(c.seeds.0, (0..25).collect::<Vec<_>>());
        assert_eq!(c.models.len(), 7);
    }

    #[test]
    fn override_changes_value_and_hash() {
        let base = ExperimentConfig::resolve::<&str>(None, &[]).unwrap();
        let c = ExperimentConfig::resolve(None, &["lambda=1.0"]).unwrap();
        assert_eq!(c.train.lambda, 1.0);
        assert_ne!(c.hash(), base.hash());
    }

    #[test]
    fn run_only_keys_leave_hash() {
        let base = ExperimentConfig::default();
        let c = ExperimentConfig::resolve(None, &["seeds=3..4", "out=/tmp/x", "jobs=4"]).unwrap();
        assert_eq!(c.hash(), base.hash());
        assert_eq!(c.seeds.0, vec![3, 4]);
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&[
            "models=vrnn,lt_structured",
            "seeds=1,5,9",
            "synth_anomaly_index=40",
            "jena_delimiter=tab",
            "lr=3e-4",
            "static_online=true",
            "budget_total=15000",
            "target=p (mbar)",
        ])
        .unwrap();
        let back = ExperimentConfig::parse_text(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn comments_and_unknown_keys() {
        let c = ExperimentConfig::parse_text("# note\nformat = latenttrack.config/1\n\nwindow = 64\n").unwrap();
        assert_eq!(c.train.window, 64);
        assert!(matches!(
            ExperimentConfig::parse_text("windw = 64"),
            Err(LtError::Parse { line: 1, .. })
        ));
        assert!(ExperimentConfig::parse_text("format = other/2").is_err());
    }

    #[test]
    fn out_of_range_rejected() {
        for o in [
            "lambda=0",
            "train_fraction=1",
            "dropout=1",
            "k_eval=0",
            "jobs=0",
            "models=",
            "models=vrnn,vrnn",
            "seeds=5..2",
            "data=jena",
            "detach_checkpoint=yes",
            "synth_anomaly_index=5000",
        ] {
            assert!(ExperimentConfig::resolve(None, &[o]).is_err(), "{o}");
        }
    }

    #[test]
    fn effective_step_is_six_hours() {
        let c = ExperimentConfig::default();
        assert_eq!(c.effective_step_minutes(), 360.0);
        assert_eq!(c.stream_options().step_minutes, 360.0);
    }
}
