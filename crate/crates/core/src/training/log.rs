use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const LOG_SCHEMA: &str = "latenttrack.trainlog/1";

/// One training step. Updates carry the pre-clip gradient norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub elbo: f64,
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub grad_norm: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    /// Objective value at each optimizer step (including skipped ones).
    pub step_losses: Vec<f64>,
    pub updates: u64,
    /// Steps whose loss or gradient was non-finite.
    pub skipped: usize,
}

/// JSON lines: a header object with the schema and `meta`, then one record per line.
/// Non-finite floats serialize as `null`.
pub fn write_log(path: &Path, report: &TrainReport, meta: &[(&str, String)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = serde_json::Map::new();
    header.insert("schema".into(), LOG_SCHEMA.into());
    for (k, v) in meta {
        header.insert((*k).into(), v.clone().into());
    }
    header.insert("updates".into(), report.updates.into());
    header.insert("skipped".into(), report.skipped.into());
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in &report.log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_header_then_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log/train.jsonl");
        let report = TrainReport {
            log: vec![LogRecord {
                step: 3,
                epoch: 1,
                elbo: -1.5,
                nll: 1.2,
                kl: 0.3,
                beta: 1.0,
                grad_norm: Some(0.4),
                wall_ms: 2.0,
            }],
            step_losses: vec![1.5],
            updates: 1,
            skipped: 0,
        };
        write_log(&path, &report, &[("model", "vrnn".into())]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["schema"], LOG_SCHEMA);
        assert_eq!(header["model"], "vrnn");
        let rec: LogRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec, report.log[0]);
    }
}
