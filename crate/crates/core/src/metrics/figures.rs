//! Columnar data behind each figure. Per-step products use each model's
//! representative seed; distributional products use every seed.

use std::path::{Path, PathBuf};

use super::report::ModelRuns;
use super::series::MetricSeries;
use super::stats::{calibration_curve, clip_percentiles, failure_analysis, pit_histogram, rank_stats, FAILURE_THRESHOLD};
use crate::columnar::ColumnFile;
use crate::error::{invalid, Result};

pub const FIGURE_SCHEMA: &str = "latenttrack.figure/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Figure {
    MeanVsT,
    VarDecomp,
    MseVar,
    NllVsT,
    RankGrid,
    Ccdf,
    Pit,
    Calib,
}

impl Figure {
    pub const ALL: [Figure; 8] = [
        Self::MeanVsT,
        Self::VarDecomp,
        Self::MseVar,
        Self::NllVsT,
        Self::RankGrid,
        Self::Ccdf,
        Self::Pit,
        Self::Calib,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MeanVsT => "mean_vs_t",
            Self::VarDecomp => "var_decomp",
            Self::MseVar => "mse_var",
            Self::NllVsT => "nll_vs_t",
            Self::RankGrid => "rank_grid",
            Self::Ccdf => "ccdf",
            Self::Pit => "pit",
            Self::Calib => "calib",
        }
    }

    /// Whether a percentile-clipped companion file is emitted.
    pub fn has_clipped(self) -> bool {
        matches!(self, Self::VarDecomp | Self::MseVar | Self::NllVsT)
    }
}

/// Bins of the PIT histogram and calibration curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FigureOptions {
    pub pit_bins: usize,
    pub calib_bins: usize,
}

impl Default for FigureOptions {
    fn default() -> Self {
        Self {
            pit_bins: 20,
            calib_bins: 10,
        }
    }
}

fn representatives(models: &[ModelRuns]) -> Result<Vec<(&str, u64, &MetricSeries)>> {
    models
        .iter()
        .map(|m| {
            let seed = m.representative()?;
            Ok((m.model.as_str(), seed, m.series(seed).expect("representative exists")))
        })
        .collect()
}

fn base(fig: Figure, reps: &[(&str, u64, &MetricSeries)], header: Vec<String>) -> ColumnFile {
    let names: Vec<&str> = reps.iter().map(|r| r.0).collect();
    let seeds: Vec<String> = reps.iter().map(|r| r.1.to_string()).collect();
    ColumnFile::new(FIGURE_SCHEMA, header)
        .with_meta("figure", fig.name())
        .with_meta("models", names.join(" "))
        .with_meta("representative_seeds", seeds.join(" "))
}

/// Per-step table with `t` and, for each model, the chosen columns.
fn per_step(
    fig: Figure,
    reps: &[(&str, u64, &MetricSeries)],
    cols: &[(&str, fn(&MetricSeries) -> &Vec<f64>)],
    with_y: bool,
    clip: bool,
) -> ColumnFile {
    let mut header = vec!["t".to_string()];
    if with_y {
        header.push("y".into());
    }
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (name, _, s) in reps {
        for (c, pick) in cols {
            header.push(format!("{name}.{c}"));
            let v = pick(s);
            data.push(if clip { clip_percentiles(v, 1.0, 99.0) } else { v.clone() });
        }
    }
    let mut f = base(fig, reps, header);
    if clip {
        f = f.with_meta("clip", "p1-p99");
    }
    let first = reps[0].2;
    for i in 0..first.len() {
        let mut row = vec![first.t[i] as f64];
        if with_y {
            row.push(first.y[i]);
        }
        row.extend(data.iter().map(|c| c[i]));
        f.push(row);
    }
    f
}

/// Builds the table for one figure; the second element is the clipped companion.
pub fn figure_data(fig: Figure, models: &[ModelRuns], opts: FigureOptions) -> Result<(ColumnFile, Option<ColumnFile>)> {
    if models.is_empty() || models.iter().any(|m| m.runs.is_empty()) {
        return Err(invalid("figure data needs at least one run per model"));
    }
    super::report::check_compatible(models)?;
    let reps = representatives(models)?;
    type Col = (&'static str, fn(&MetricSeries) -> &Vec<f64>);
    let per = |cols: &[Col], with_y: bool| {
        let raw = per_step(fig, &reps, cols, with_y, false);
        let clipped = fig.has_clipped().then(|| per_step(fig, &reps, cols, with_y, true));
        (raw, clipped)
    };
    Ok(match fig {
        Figure::MeanVsT => per(&[("mean", |s| &s.mean), ("var_tot", |s| &s.var_tot)], true),
        Figure::VarDecomp => per(
            &[("var_alea", |s| &s.var_alea), ("var_epi", |s| &s.var_epi), ("var_tot", |s| &s.var_tot)],
            false,
        ),
        Figure::MseVar => per(&[("mse", |s| &s.mse), ("var_tot", |s| &s.var_tot)], false),
        Figure::NllVsT => per(&[("nll", |s| &s.nll)], false),
        Figure::RankGrid => {
            let matrix: Vec<Vec<f64>> = reps.iter().map(|r| r.2.nll.clone()).collect();
            let r = rank_stats(&matrix)?;
            let mut f = base(fig, &reps, vec!["top1".into(), "top2".into(), "top3".into()]);
            f = f.with_meta("metric", "nll").with_meta("missing", "-1");
            for order in &r.top3 {
                f.push((0..3).map(|i| order.get(i).map_or(-1.0, |&m| m as f64)).collect());
            }
            (f, None)
        }
        Figure::Ccdf => {
            let mut f = base(fig, &reps, vec!["model_index".into(), "peak_nll".into(), "ccdf".into()]);
            f = f.with_meta("threshold", FAILURE_THRESHOLD);
            for (i, m) in models.iter().enumerate() {
                let runs: Vec<&[f64]> = m.runs.iter().map(|(_, s)| s.nll.as_slice()).collect();
                for (x, p) in failure_analysis(&runs, FAILURE_THRESHOLD)?.ccdf {
                    f.push(vec![i as f64, x, p]);
                }
            }
            (f, None)
        }
        Figure::Pit => {
            let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
            header.extend(models.iter().map(|m| format!("{}.count", m.model)));
            let mut f = base(fig, &reps, header);
            let hists = models
                .iter()
                .map(|m| {
                    let all: Vec<f64> = m.runs.iter().flat_map(|(_, s)| s.pit.iter().copied()).collect();
                    pit_histogram(&all, opts.pit_bins)
                })
                .collect::<Result<Vec<_>>>()?;
            for b in 0..opts.pit_bins {
                let mut row = vec![b as f64 / opts.pit_bins as f64, (b + 1) as f64 / opts.pit_bins as f64];
                row.extend(hists.iter().map(|h| h[b] as f64));
                f.push(row);
            }
            (f, None)
        }
        Figure::Calib => {
            let header = ["model_index", "bin", "mean_var", "mean_sq_err", "count"].map(String::from).to_vec();
            let mut f = base(fig, &reps, header);
            for (i, (_, _, s)) in reps.iter().enumerate() {
                for (b, bin) in calibration_curve(&s.var_tot, &s.mse, opts.calib_bins)?.iter().enumerate() {
                    f.push(vec![i as f64, b as f64, bin.mean_var, bin.mean_sq_err, bin.count as f64]);
                }
            }
            (f, None)
        }
    })
}

/// Writes every figure table into `dir` as `<name>.csv` (and `<name>_clipped.csv`).
pub fn emit_figure_data(models: &[ModelRuns], dir: &Path, opts: FigureOptions) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for fig in Figure::ALL {
        let (raw, clipped) = figure_data(fig, models, opts)?;
        let path = dir.join(format!("{}.csv", fig.name()));
        raw.write(&path)?;
        written.push(path);
        if let Some(c) = clipped {
            let path = dir.join(format!("{}_clipped.csv", fig.name()));
            c.write(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}
