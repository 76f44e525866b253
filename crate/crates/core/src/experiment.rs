//! Orchestration: build the stream once, size every model against its
//! budget, then train, evaluate and persist each (model, seed) run before
//! aggregating.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::baselines::StaticOptim;
use crate::budget::{solve_budget, AnyModel, BudgetSolution};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{build_stream, downsample, load_jena, stream_hash, synth_stream, SplitSpec, StreamStep};
use crate::error::{LtError, Result};
use crate::inference::{stream_evaluate, warm_up, Filter, StaticForecaster};
use crate::metrics::{compare, emit_figure_data, CompareReport, FigureOptions, MetricSeries, ModelRuns};
use crate::model::ModelKind;
use crate::training::{train_sequential, train_static, write_log, TrainConfig, TrainReport};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// The stream shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub steps: Vec<StreamStep>,
    pub split: SplitSpec,
    pub x_dim: usize,
    pub hash: String,
    /// Provenance recorded in every run manifest.
    pub meta: Vec<(String, String)>,
}

impl PreparedData {
    pub fn train(&self) -> &[StreamStep] {
        self.split.split(&self.steps).0
    }

    pub fn eval(&self) -> &[StreamStep] {
        self.split.split(&self.steps).1
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut meta = vec![("data".to_string(), format!("{:?}", cfg.data).to_lowercase())];
    let (steps, split) = match cfg.data {
        DataSource::Synth => {
            let s = synth_stream(&cfg.synth_options())?;
            meta.push(("synth_kind".into(), s.kind.to_string()));
            meta.push(("synth_seed".into(), s.seed.to_string()));
            if let Some(i) = s.anomaly_index {
                meta.push(("anomaly_index".into(), i.to_string()));
            }
            let split = SplitSpec::new(s.steps.len(), cfg.train_fraction);
            (s.steps, split)
        }
        DataSource::Jena => {
            let path = cfg.jena_path.as_ref().ok_or_else(|| LtError::Config("jena_path is unset".into()))?;
            let table = downsample(&load_jena(path, cfg.jena_delimiter)?, cfg.downsample)?;
            let built = build_stream(&table, &cfg.stream_options())?;
            meta.push(("effective_step_hours".into(), (cfg.effective_step_minutes() / 60.0).to_string()));
            meta.push(("target".into(), cfg.target.clone()));
            (built.steps, built.split)
        }
    };
    let x_dim = steps.first().map(|s| s.x.len()).ok_or_else(|| LtError::Config("stream is empty".into()))?;
    if split.boundary == 0 || split.boundary >= steps.len() {
        return Err(LtError::Config(format!(
            "train fraction {} leaves an empty split of {} steps",
            cfg.train_fraction,
            steps.len()
        )));
    }
    meta.push(("stream_len".into(), steps.len().to_string()));
    meta.push(("split_boundary".into(), split.boundary.to_string()));
    meta.push(("train_fraction".into(), split.train_fraction.to_string()));
    Ok(PreparedData {
        hash: stream_hash(&steps),
        steps,
        split,
        x_dim,
        meta,
    })
}

/// Budget solution for every configured model, in config order.
pub fn solve_models(cfg: &ExperimentConfig, x_dim: usize) -> Result<Vec<BudgetSolution>> {
    cfg.models
        .iter()
        .map(|&kind| solve_budget(kind, cfg.fixed_dims(x_dim), cfg.budget_targets(kind)))
        .collect()
}

/// `<out>/run-<config hash>`, created with the resolved config. An existing
/// directory must hold a config with identical result-affecting content.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.join(format!("run-{}", cfg.hash()));
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        let existing = ExperimentConfig::parse_text(&std::fs::read_to_string(&path)?)?;
        let strip = |c: &ExperimentConfig| {
            c.entries()
                .into_iter()
                .filter(|(k, _)| !crate::config::UNHASHED_KEYS.contains(k))
                .collect::<Vec<_>>()
        };
        if strip(&existing) != strip(cfg) {
            return Err(LtError::Incompatible(format!(
                "{} holds a different configuration with the same hash",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&path, cfg.render())?;
    Ok(dir)
}

pub fn seed_dir(run_dir: &Path, kind: ModelKind, seed: u64) -> PathBuf {
    run_dir.join(kind.name()).join(format!("seed_{seed}"))
}

fn optim(t: &TrainConfig) -> StaticOptim {
    StaticOptim {
        lr: t.lr,
        clip: t.grad_clip,
    }
}

/// Manifest entries shared by every artifact of one run.
pub fn run_manifest(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    sol: &BudgetSolution,
    seed: u64,
) -> Vec<(String, String)> {
    let kind = sol.spec.kind();
    let variant = match kind {
        ModelKind::LtStructured => "structured",
        ModelKind::LtUnstructured => "unstructured",
        _ => "-",
    };
    let widths: Vec<String> = sol.spec.widths().iter().map(|(k, v)| format!("{k}:{v}")).collect();
    let mut m = vec![
        ("model".to_string(), kind.name().to_string()),
        ("variant".into(), variant.into()),
        ("seed".into(), seed.to_string()),
        ("config_hash".into(), cfg.hash()),
        ("stream_hash".into(), data.hash.clone()),
        ("algorithm".into(), cfg.train.algorithm.to_string()),
        ("widths".into(), widths.join(" ")),
        ("params_total".into(), sol.counts.total.to_string()),
        ("params_inference".into(), sol.counts.inference_time.to_string()),
        ("budget_feasible".into(), sol.feasible.to_string()),
    ];
    m.extend(data.meta.iter().cloned());
    m
}

fn write_manifest(dir: &Path, manifest: &[(String, String)]) -> Result<()> {
    let text: String = manifest.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Trains one seed from scratch and persists its checkpoint, log and manifest.
pub fn train_seed(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    sol: &BudgetSolution,
    seed: u64,
    dir: &Path,
) -> Result<(AnyModel, TrainReport)> {
    let tcfg = cfg.train_config(seed, data.train().len());
    let mut model = sol.spec.build(seed, optim(&tcfg));
    let report = match &mut model {
        AnyModel::Sequential(m) => train_sequential(m.as_mut(), data.train(), &tcfg)?,
        AnyModel::Static(m) => train_static(m.as_mut(), data.train(), &tcfg)?,
    };
    let mut manifest = run_manifest(cfg, data, sol, seed);
    manifest.push(("updates".into(), report.updates.to_string()));
    manifest.push(("skipped_steps".into(), report.skipped.to_string()));
    std::fs::create_dir_all(dir)?;
    save_checkpoint(dir, &model.param_sets(), &manifest)?;
    let meta: Vec<(&str, String)> = manifest.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_log(&dir.join(LOG_FILE), &report, &meta)?;
    write_manifest(dir, &manifest)?;
    Ok((model, report))
}

/// Warms the model up on the training split, evaluates the rest of the
/// stream and persists the series.
pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    sol: &BudgetSolution,
    model: &mut AnyModel,
    seed: u64,
    updates_done: u64,
    dir: &Path,
) -> Result<MetricSeries> {
    let mut series = match model {
        AnyModel::Sequential(m) => {
            let mut f = Filter::new(m.as_ref());
            warm_up(&mut f, data.train(), cfg.k_eval, seed)?;
            stream_evaluate(&mut f, data.eval(), cfg.k_eval, seed)?
        }
        AnyModel::Static(m) => {
            let online = cfg.online_updates(seed, updates_done, data.train().len());
            let mut f = StaticForecaster::new(m.as_mut(), online);
            stream_evaluate(&mut f, data.eval(), cfg.k_eval, seed)?
        }
    };
    for (k, v) in run_manifest(cfg, data, sol, seed) {
        series.set_manifest(&k, v);
    }
    series.set_manifest("non_finite_nll", series.non_finite_nll());
    std::fs::create_dir_all(dir)?;
    series.write(&dir.join(METRICS_FILE))?;
    Ok(series)
}

/// Rebuilds a model and loads its persisted parameters; returns it with the
/// number of training updates it took.
pub fn load_seed(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    sol: &BudgetSolution,
    seed: u64,
    dir: &Path,
) -> Result<(AnyModel, u64)> {
    let mut model = sol.spec.build(seed, optim(&cfg.train_config(seed, data.train().len())));
    let meta = load_checkpoint(dir, &mut model.param_sets_mut())?;
    let get = |k: &str| meta.iter().find(|(mk, _)| mk == k).map(|(_, v)| v.as_str());
    if get("config_hash") != Some(cfg.hash().as_str()) {
        return Err(LtError::Incompatible(format!(
            "checkpoint in {} was trained under a different config",
            dir.display()
        )));
    }
    let updates = get("updates").and_then(|v| v.parse().ok()).unwrap_or(0);
    Ok((model, updates))
}

/// A (model, seed) job that did not complete.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedRun {
    pub model: ModelKind,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub solutions: Vec<BudgetSolution>,
    pub runs: Vec<ModelRuns>,
    pub report: Option<CompareReport>,
    pub failed: Vec<FailedRun>,
}

/// Which stages of each seed to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    Train,
    Evaluate,
    Both,
}

/// Runs `job` for every (model, seed) pair on `jobs` threads; results come
/// back in (model, seed) order.
fn for_each_job<T: Send>(
    cfg: &ExperimentConfig,
    job: impl Fn(usize, u64) -> Result<T> + Sync,
) -> Vec<(usize, u64, Result<T>)> {
    let pairs: Vec<(usize, u64)> = (0..cfg.models.len())
        .flat_map(|m| cfg.seeds.0.iter().map(move |&s| (m, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(pairs.len()));
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(pairs.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(m, s)) = pairs.get(i) else { break };
                let r = job(m, s);
                results.lock().expect("worker panicked").push((i, m, s, r));
            });
        }
    });
    let mut results = results.into_inner().expect("worker panicked");
    results.sort_by_key(|r| r.0);
    results.into_iter().map(|(_, m, s, r)| (m, s, r)).collect()
}

/// Trains and/or evaluates every configured (model, seed) pair, then (when
/// evaluating) writes `report.md`, `compare.csv` and the figure tables.
pub fn run_experiment(cfg: &ExperimentConfig, stages: Stages) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let solutions = solve_models(cfg, data.x_dim)?;
    let run_dir = prepare_run_dir(cfg)?;
    let results = for_each_job(cfg, |m, seed| {
        let sol = &solutions[m];
        let dir = seed_dir(&run_dir, sol.spec.kind(), seed);
        let (mut model, updates) = match stages {
            Stages::Evaluate => load_seed(cfg, &data, sol, seed, &dir)?,
            Stages::Train | Stages::Both => {
                let (model, report) = train_seed(cfg, &data, sol, seed, &dir)?;
                (model, report.updates)
            }
        };
        match stages {
            Stages::Train => Ok(None),
            _ => evaluate_seed(cfg, &data, sol, &mut model, seed, updates, &dir).map(Some),
        }
    });
    let mut failed = Vec::new();
    let mut per_model: Vec<Vec<(u64, MetricSeries)>> = vec![Vec::new(); cfg.models.len()];
    for (m, seed, r) in results {
        match r {
            Ok(Some(series)) => per_model[m].push((seed, series)),
            Ok(None) => {}
            Err(e) => failed.push(FailedRun {
                model: cfg.models[m],
                seed,
                error: e.to_string(),
            }),
        }
    }
    let runs: Vec<ModelRuns> = cfg
        .models
        .iter()
        .zip(per_model)
        .filter(|(_, r)| !r.is_empty())
        .map(|(k, r)| ModelRuns::new(k.name(), r))
        .collect();
    let report = if runs.is_empty() {
        None
    } else {
        Some(aggregate(&runs, &run_dir, cfg.figure_options())?)
    };
    Ok(ExperimentOutcome {
        run_dir,
        solutions,
        runs,
        report,
        failed,
    })
}

/// Writes the comparison report and figure tables for `runs` into `dir`.
pub fn aggregate(runs: &[ModelRuns], dir: &Path, opts: FigureOptions) -> Result<CompareReport> {
    let report = compare(runs)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.md"), report.render())?;
    report.to_columns().write(&dir.join("compare.csv"))?;
    emit_figure_data(runs, &dir.join("figures"), opts)?;
    Ok(report)
}

/// Reads every `<model>/seed_<s>/metrics.csv` under `run_dir`. Known models
/// come first in canonical order, others follow by name.
pub fn collect_runs(run_dir: &Path) -> Result<Vec<ModelRuns>> {
    let mut models: Vec<(usize, String, Vec<(u64, MetricSeries)>)> = Vec::new();
    for entry in std::fs::read_dir(run_dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        let mut runs = Vec::new();
        for sub in std::fs::read_dir(entry.path())? {
            let sub = sub?;
            let sname = sub.file_name().to_string_lossy().to_string();
            let Some(seed) = sname.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) else {
                continue;
            };
            let path = sub.path().join(METRICS_FILE);
            if path.exists() {
                runs.push((seed, MetricSeries::read(&path)?));
            }
        }
        if !runs.is_empty() {
            let order = ModelKind::ALL
                .iter()
                .position(|k| k.name() == name)
                .unwrap_or(ModelKind::ALL.len());
            models.push((order, name, runs));
        }
    }
    models.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    Ok(models.into_iter().map(|(_, n, r)| ModelRuns::new(n, r)).collect())
}
