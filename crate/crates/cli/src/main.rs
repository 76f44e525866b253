//! `latenttrack` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latenttrack::config::ExperimentConfig;
use latenttrack::data::{synth_stream, write_stream_cache, SynthKind, SynthOptions};
use latenttrack::error::{LtError, Result};
use latenttrack::experiment::{aggregate, collect_runs, prepare_data, run_experiment, solve_models, Stages};
use latenttrack::gradcheck::{gradcheck_suite, GRADCHECK_TOLERANCE};
use latenttrack::metrics::{compare, emit_figure_data, FigureOptions, ModelRuns};

#[derive(Parser)]
#[command(name = "latenttrack", version, about = "Streaming probabilistic forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration resolution shared by the experiment commands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed range `a..b` (inclusive) or list `a,b,c`.
    #[arg(long, value_name = "SEEDS")]
    seeds: Option<String>,
    /// Output root [env: LATENTTRACK_OUT].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = &self.seeds {
            overrides.push(format!("seeds={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("out={}", o.display()));
        }
        if let Some(j) = self.jobs {
            overrides.push(format!("jobs={j}"));
        }
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and aggregate every configured model and seed.
    Run(ConfigArgs),
    /// Train and checkpoint every configured model and seed.
    Train(ConfigArgs),
    /// Evaluate checkpoints written by `train`, then aggregate.
    Evaluate(ConfigArgs),
    /// Aggregate persisted runs into the comparison report.
    Compare {
        /// Run directories (`run-<hash>`); models are merged across them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write report.md, compare.csv and figure tables here.
        #[arg(long, value_name = "DIR")]
        write: Option<PathBuf>,
    },
    /// Finite-difference check of every model gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        draws: u64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
        tolerance: f64,
    },
    /// Parameter ledger of the solved architectures.
    Budget {
        #[command(flatten)]
        config: ConfigArgs,
        /// Input width to size against instead of the configured stream's.
        #[arg(long, value_name = "N")]
        x_dim: Option<usize>,
    },
    /// Write figure tables for persisted runs.
    EmitFigures {
        run: PathBuf,
        /// Destination directory [default: RUN/figures].
        #[arg(long, value_name = "DIR")]
        dest: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        pit_bins: usize,
        #[arg(long, default_value_t = 10)]
        calib_bins: usize,
    },
    /// Generate a synthetic stream as a columnar file.
    Synth {
        /// regime_switch, seasonal_drift or anomaly_spike.
        #[arg(long)]
        kind: SynthKind,
        #[arg(long, default_value_t = 5000)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        anomaly_index: Option<usize>,
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(c) => experiment(&c, Stages::Both),
        Command::Train(c) => experiment(&c, Stages::Train),
        Command::Evaluate(c) => experiment(&c, Stages::Evaluate),
        Command::Compare { runs, write } => compare_cmd(&runs, write.as_deref()),
        Command::Gradcheck { draws, tolerance } => gradcheck(draws, tolerance),
        Command::Budget { config, x_dim } => budget(&config, x_dim),
        Command::EmitFigures {
            run,
            dest,
            pit_bins,
            calib_bins,
        } => {
            let runs = collect_runs(&run)?;
            let dest = dest.unwrap_or_else(|| run.join("figures"));
            let files = emit_figure_data(&runs, &dest, FigureOptions { pit_bins, calib_bins })?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth {
            kind,
            length,
            seed,
            noise,
            anomaly_index,
            output,
        } => {
            let mut opts = SynthOptions::new(kind, length, seed);
            opts.noise = noise.unwrap_or(opts.noise);
            opts.anomaly_index = anomaly_index;
            let s = synth_stream(&opts)?;
            let mut meta = vec![("kind", kind.to_string()), ("seed", seed.to_string())];
            if let Some(i) = s.anomaly_index {
                meta.push(("anomaly_index", i.to_string()));
            }
            write_stream_cache(&output, &s.steps, &meta)?;
            println!("wrote {} steps to {}", s.steps.len(), output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn experiment(args: &ConfigArgs, stages: Stages) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let out = run_experiment(&cfg, stages)?;
    println!("run directory: {}", out.run_dir.display());
    if let Some(r) = &out.report {
        print!("{}", r.render());
    }
    if out.failed.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("failed runs:");
    for f in &out.failed {
        eprintln!("  {} seed {}: {}", f.model, f.seed, f.error);
    }
    Ok(ExitCode::FAILURE)
}

fn compare_cmd(dirs: &[PathBuf], write: Option<&Path>) -> Result<ExitCode> {
    let mut models: Vec<ModelRuns> = Vec::new();
    for d in dirs {
        for m in collect_runs(d)? {
            if models.iter().any(|e| e.model == m.model) {
                return Err(LtError::Incompatible(format!("model {} appears in more than one run", m.model)));
            }
            models.push(m);
        }
    }
    if models.is_empty() {
        return Err(LtError::Config("no evaluated runs found".into()));
    }
    let report = match write {
        Some(dir) => aggregate(&models, dir, FigureOptions::default())?,
        None => compare(&models)?,
    };
    print!("{}", report.render());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(draws: u64, tolerance: f64) -> Result<ExitCode> {
    let results = gradcheck_suite(draws)?;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for r in &results {
        match worst.iter_mut().find(|w| w.0 == r.name) {
            Some(w) => w.1 = w.1.max(r.rel_error),
            None => worst.push((r.name, r.rel_error)),
        }
    }
    println!("{:<16} {:>14}  status (tolerance {tolerance:e}, {draws} draws)", "objective", "max rel error");
    for (name, e) in &worst {
        let ok = *e < tolerance;
        println!("{name:<16} {e:>14.3e}  {}", if ok { "ok" } else { "FAIL" });
    }
    Ok(if results.iter().all(|r| r.rel_error < tolerance) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn budget(args: &ConfigArgs, x_dim: Option<usize>) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let x_dim = match x_dim {
        Some(d) => d,
        None => prepare_data(&cfg)?.x_dim,
    };
    let sols = solve_models(&cfg, x_dim)?;
    println!("input width {x_dim}\n");
    println!(
        "| Model | Widths | Total | Inference-time | Target total | Target inference | Within tolerance |"
    );
    println!("|---|---|---|---|---|---|---|");
    for s in &sols {
        let kind = s.spec.kind();
        let t = cfg.budget_targets(kind);
        let widths: Vec<String> = s.spec.widths().iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "| {} | {} | {} | {} | {} | {} | {} |",
            kind.label(),
            widths.join(" "),
            s.counts.total,
            s.counts.inference_time,
            t.total,
            t.inference,
            if s.feasible { "yes" } else { "no" }
        );
    }
    Ok(if sols.iter().all(|s| s.feasible) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
