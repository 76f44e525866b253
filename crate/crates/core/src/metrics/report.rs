//! Cross-model comparison: the per-model NLL/MSE location statistics and
//! rank shares, plus failure rates.

use std::fmt::Write as _;

use super::series::MetricSeries;
use super::stats::{
    failure_analysis, lower_median, rank_stats, representative_seed, temporal_summary, FAILURE_THRESHOLD,
};
use crate::columnar::ColumnFile;
use crate::error::{invalid, LtError, Result};

pub const REPORT_SCHEMA: &str = "latenttrack.compare/1";

/// All evaluated seeds of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRuns {
    pub model: String,
    /// `(seed, series)` sorted by seed.
    pub runs: Vec<(u64, MetricSeries)>,
}

impl ModelRuns {
    pub fn new(model: impl Into<String>, mut runs: Vec<(u64, MetricSeries)>) -> Self {
        runs.sort_by_key(|r| r.0);
        Self {
            model: model.into(),
            runs,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.0).collect()
    }

    pub fn series(&self, seed: u64) -> Option<&MetricSeries> {
        self.runs.iter().find(|r| r.0 == seed).map(|r| &r.1)
    }

    /// Seed closest to the median temporal-mean NLL.
    pub fn representative(&self) -> Result<u64> {
        let means: Vec<(u64, f64)> = self
            .runs
            .iter()
            .map(|(s, m)| Ok((*s, temporal_summary(&m.nll)?.mean)))
            .collect::<Result<_>>()?;
        representative_seed(&means)
    }
}

/// One metric's columns for one model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricColumns {
    pub mean: f64,
    pub median: f64,
    pub trimmed_mean: f64,
    pub trimmed_median: f64,
    pub pct_rank1: f64,
    pub pct_rank_le2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub model: String,
    pub seeds: usize,
    pub nll: MetricColumns,
    pub mse: MetricColumns,
    pub failure_rate: f64,
    /// Non-finite NLL steps across all seeds, excluded from the summaries.
    pub non_finite_nll: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<ModelRow>,
}

/// Checks that every run covers the same stream.
pub fn check_compatible(models: &[ModelRuns]) -> Result<()> {
    let mut reference: Option<(&str, usize, Option<&str>)> = None;
    for m in models {
        if m.runs.is_empty() {
            return Err(invalid(format!("model {} has no runs", m.model)));
        }
        for (seed, s) in &m.runs {
            let here = (m.model.as_str(), s.len(), s.manifest("stream_hash"));
            match reference {
                None => reference = Some(here),
                Some((first, len, hash)) => {
                    if len != here.1 || (hash.is_some() && here.2.is_some() && hash != here.2) {
                        return Err(LtError::Incompatible(format!(
                            "{} seed {seed} was evaluated on a different stream than {first}",
                            m.model
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn median_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    lower_median(&v)
}

/// Location statistics are per-seed temporal summaries reduced by the
/// across-seed median; rank shares compare models seed by seed over the
/// seeds they share and average the percentages.
pub fn compare(models: &[ModelRuns]) -> Result<CompareReport> {
    if models.is_empty() {
        return Err(invalid("nothing to compare"));
    }
    check_compatible(models)?;
    let shared: Vec<u64> = models[0]
        .seeds()
        .into_iter()
        .filter(|s| models.iter().all(|m| m.series(*s).is_some()))
        .collect();
    let n = models.len();
    let mut ranks = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for &seed in &shared {
        for (mi, pick) in [|s: &MetricSeries| s.nll.clone(), |s: &MetricSeries| s.mse.clone()]
            .iter()
            .enumerate()
        {
            let matrix: Vec<Vec<f64>> = models.iter().map(|m| pick(m.series(seed).expect("shared"))).collect();
            let r = rank_stats(&matrix)?;
            for i in 0..n {
                ranks[2 * mi][i] += r.pct_rank1[i] / shared.len() as f64;
                ranks[2 * mi + 1][i] += r.pct_rank_le2[i] / shared.len() as f64;
            }
        }
    }
    let nan_if_unshared = |v: f64| if shared.is_empty() { f64::NAN } else { v };
    let mut rows = Vec::with_capacity(n);
    for (i, m) in models.iter().enumerate() {
        let columns = |pick: fn(&MetricSeries) -> &Vec<f64>, r1: f64, r2: f64| -> Result<MetricColumns> {
            let sums = m
                .runs
                .iter()
                .map(|(_, s)| temporal_summary(pick(s)))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricColumns {
                mean: median_of(sums.iter().map(|s| s.mean)),
                median: median_of(sums.iter().map(|s| s.median)),
                trimmed_mean: median_of(sums.iter().map(|s| s.trimmed_mean)),
                trimmed_median: median_of(sums.iter().map(|s| s.trimmed_median)),
                pct_rank1: nan_if_unshared(r1),
                pct_rank_le2: nan_if_unshared(r2),
            })
        };
        let nll = columns(|s| &s.nll, ranks[0][i], ranks[1][i])?;
        let mse = columns(|s| &s.mse, ranks[2][i], ranks[3][i])?;
        let runs: Vec<&[f64]> = m.runs.iter().map(|(_, s)| s.nll.as_slice()).collect();
        rows.push(ModelRow {
            model: m.model.clone(),
            seeds: m.runs.len(),
            nll,
            mse,
            failure_rate: failure_analysis(&runs, FAILURE_THRESHOLD)?.failure_rate,
            non_finite_nll: m.runs.iter().map(|(_, s)| s.non_finite_nll()).sum(),
            steps: m.runs.iter().map(|(_, s)| s.len()).sum(),
        });
    }
    Ok(CompareReport { rows })
}

pub const REPORT_COLUMNS: [&str; 6] = ["Mean", "Median", "Trimmed mean", "Trimmed median", "% Rank-1", "% Rank<=2"];

fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

impl CompareReport {
    /// Markdown table with one block per metric.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, pick) in [
            ("NLL", (|r: &ModelRow| r.nll) as fn(&ModelRow) -> MetricColumns),
            ("MSE", |r: &ModelRow| r.mse),
        ] {
            let _ = writeln!(out, "## {name}\n");
            let _ = writeln!(out, "| Model | {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for r in &self.rows {
                let c = pick(r);
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {:.1} | {:.1} |",
                    r.model,
                    fmt_num(c.mean),
                    fmt_num(c.median),
                    fmt_num(c.trimmed_mean),
                    fmt_num(c.trimmed_median),
                    c.pct_rank1,
                    c.pct_rank_le2
                );
            }
            out.push('\n');
        }
        let _ = writeln!(out, "## Failures\n");
        let _ = writeln!(out, "| Model | Seeds | Failure rate (peak NLL > 1e6) | Non-finite NLL steps |");
        let _ = writeln!(out, "|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {:.3} | {}/{} |",
                r.model, r.seeds, r.failure_rate, r.non_finite_nll, r.steps
            );
        }
        out
    }

    /// One row per model; model order is recorded in the metadata.
    pub fn to_columns(&self) -> ColumnFile {
        let mut header = vec!["model_index".to_string(), "seeds".to_string()];
        for metric in ["nll", "mse"] {
            for c in ["mean", "median", "trimmed_mean", "trimmed_median", "pct_rank1", "pct_rank_le2"] {
                header.push(format!("{metric}_{c}"));
            }
        }
        header.extend(["failure_rate", "non_finite_nll", "steps"].map(String::from));
        let models: Vec<&str> = self.rows.iter().map(|r| r.model.as_str()).collect();
        let mut f = ColumnFile::new(REPORT_SCHEMA, header).with_meta("models", models.join(" "));
        for (i, r) in self.rows.iter().enumerate() {
            let mut row = vec![i as f64, r.seeds as f64];
            for c in [r.nll, r.mse] {
                row.extend([c.mean, c.median, c.trimmed_mean, c.trimmed_median, c.pct_rank1, c.pct_rank_le2]);
            }
            row.extend([r.failure_rate, r.non_finite_nll as f64, r.steps as f64]);
            f.push(row);
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::Mixture;

    fn series(values: &[(f64, f64)], hash: &str) -> MetricSeries {
        let mut s = MetricSeries::default();
        s.set_manifest("stream_hash", hash);
        for (t, (y, m)) in values.iter().enumerate() {
            s.push(t, *y, &Mixture::single(*m, 0.0));
        }
        s
    }

    #[test]
    fn report_has_all_columns() {
        let a = ModelRuns::new("a", vec![(0, series(&[(0.0, 0.0), (1.0, 0.9)], "h")), (1, series(&[(0.0, 0.1), (1.0, 1.0)], "h"))]);
        let b = ModelRuns::new("b", vec![(0, series(&[(0.0, 2.0), (1.0, 3.0)], "h")), (1, series(&[(0.0, 2.0), (1.0, 3.0)], "h"))]);
        let r = compare(&[a, b]).unwrap();
        assert_eq!(r.rows[0].nll.pct_rank1, 100.0);
        assert_eq!(r.rows[1].nll.pct_rank1, 0.0);
        assert_eq!(r.rows[1].nll.pct_rank_le2, 100.0);
        let text = r.render();
        for c in REPORT_COLUMNS {
            assert!(text.contains(c));
        }
        assert_eq!(r.to_columns().header.len(), 17);
    }

    #[test]
    fn mismatched_streams_refused() {
        let a = ModelRuns::new("a", vec![(0, series(&[(0.0, 0.0)], "h1"))]);
        let b = ModelRuns::new("b", vec![(0, series(&[(0.0, 0.0)], "h2"))]);
        assert!(matches!(compare(&[a, b]), Err(LtError::Incompatible(_))));
    }
}
