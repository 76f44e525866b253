use std::f64::consts::TAU;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};

use super::{SplitSpec, StreamStep};
use crate::error::{LtError, Result};

const TIMESTAMP_FORMAT: &str = "%d.%m.%Y %H:%M:%S";

/// Parsed delimiter-separated table: one optional timestamp column plus
/// numeric columns in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| LtError::MissingColumn(name.to_string()))
    }
}

fn is_timestamp_header(name: &str) -> bool {
    let n = name.to_ascii_lowercase();
    n.contains("date") || n.contains("time") && !n.contains('(')
}

pub fn load_jena(path: &Path, delimiter: u8) -> Result<RawTable> {
    let text = std::fs::read_to_string(path)?;
    load_jena_str(&text, delimiter)
}

/// Parses a header row and numeric records. Line numbers in errors are 1-based
/// and count the header.
pub fn load_jena_str(text: &str, delimiter: u8) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| LtError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(LtError::Parse {
            line: 1,
            msg: "missing header".into(),
        });
    }
    let ts_col = headers.iter().position(|h| is_timestamp_header(h));
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != ts_col)
        .map(|(_, h)| h.clone())
        .collect();
    let mut columns = vec![Vec::new(); names.len()];
    let mut timestamps = ts_col.map(|_| Vec::new());
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| LtError::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(LtError::Parse {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut c = 0;
        for (i, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(i) == ts_col {
                let ts = NaiveDateTime::parse_from_str(cell, TIMESTAMP_FORMAT).map_err(|e| {
                    LtError::Parse {
                        line,
                        msg: format!("bad timestamp `{cell}`: {e}"),
                    }
                })?;
                timestamps.as_mut().unwrap().push(ts);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| LtError::Parse {
                line,
                msg: format!("non-numeric cell `{cell}` in column `{}`", headers[i]),
            })?;
            columns[c].push(v);
            c += 1;
        }
    }
    Ok(RawTable {
        names,
        columns,
        timestamps,
    })
}

/// Keeps every `factor`-th record starting at index 0.
pub fn downsample(table: &RawTable, factor: usize) -> Result<RawTable> {
    if factor == 0 {
        return Err(crate::error::invalid("downsample factor must be ≥ 1"));
    }
    let pick = |v: &[f64]| v.iter().step_by(factor).copied().collect::<Vec<_>>();
    Ok(RawTable {
        names: table.names.clone(),
        columns: table.columns.iter().map(|c| pick(c)).collect(),
        timestamps: table
            .timestamps
            .as_ref()
            .map(|ts| ts.iter().step_by(factor).copied().collect()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOptions {
    /// Number of past rows (including the current one) flattened into `x_t`.
    pub history: usize,
    /// Steps ahead of the current row for the target.
    pub horizon: usize,
    pub target: String,
    pub train_fraction: f64,
    /// Record spacing used to synthesize calendar covariates when the table has no timestamps.
    pub step_minutes: f64,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            history: 8,
            horizon: 6,
            target: "T (degC)".into(),
            train_fraction: 0.7,
            step_minutes: 360.0,
        }
    }
}

/// Per-column z-score statistics from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Raw rows `[0, rows_used)` contributed to the statistics.
    pub rows_used: usize,
}

#[derive(Debug, Clone)]
pub struct BuiltStream {
    pub steps: Vec<StreamStep>,
    pub stats: NormStats,
    pub split: SplitSpec,
    pub x_dim: usize,
}

fn calendar(ts: Option<&NaiveDateTime>, row: usize, step_minutes: f64) -> [f64; 4] {
    let (day_frac, dow) = match ts {
        Some(ts) => {
            let minutes = ts.hour() as f64 * 60.0 + ts.minute() as f64 + ts.second() as f64 / 60.0;
            (minutes / 1440.0, ts.weekday().num_days_from_monday() as f64)
        }
        None => {
            let minutes = row as f64 * step_minutes;
            let days = (minutes / 1440.0).floor();
            (minutes / 1440.0 - days, days.rem_euclid(7.0))
        }
    };
    let week_frac = (dow + day_frac) / 7.0;
    [
        (TAU * day_frac).sin(),
        (TAU * day_frac).cos(),
        (TAU * week_frac).sin(),
        (TAU * week_frac).cos(),
    ]
}

/// Builds `x_t` from the last `history` rows of every numeric column (z-scored
/// with training-split statistics) plus calendar encodings, and `y_t` as the
/// raw target `horizon` rows ahead.
pub fn build_stream(table: &RawTable, opts: &StreamOptions) -> Result<BuiltStream> {
    let n_rows = table.len();
    if opts.history == 0 {
        return Err(crate::error::invalid("history must be ≥ 1"));
    }
    if n_rows <= opts.history + opts.horizon {
        return Err(crate::error::invalid(format!(
            "table has {n_rows} rows; need more than history {} + horizon {}",
            opts.history, opts.horizon
        )));
    }
    let target = table.column(&opts.target)?;
    let n_steps = n_rows - (opts.history - 1) - opts.horizon;
    let split = SplitSpec::new(n_steps, opts.train_fraction);
    let rows_used = (split.boundary + opts.history - 1).clamp(1, n_rows);
    let (mean, std): (Vec<f64>, Vec<f64>) = table
        .columns
        .iter()
        .map(|c| {
            let s = &c[..rows_used];
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64;
            (m, if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        })
        .unzip();
    let n_cols = table.columns.len();
    let x_dim = opts.history * n_cols + 4;
    let steps = (0..n_steps)
        .map(|i| {
            let row = i + opts.history - 1;
            let mut x = Vec::with_capacity(x_dim);
            for r in row + 1 - opts.history..=row {
                for (c, col) in table.columns.iter().enumerate() {
                    x.push((col[r] - mean[c]) / std[c]);
                }
            }
            let ts = table.timestamps.as_ref().map(|t| &t[row]);
            x.extend(calendar(ts, row, opts.step_minutes));
            StreamStep {
                t: i,
                x,
                y: target[row + opts.horizon],
            }
        })
        .collect();
    Ok(BuiltStream {
        steps,
        stats: NormStats {
            mean,
            std,
            rows_used,
        },
        split,
        x_dim,
    })
}
