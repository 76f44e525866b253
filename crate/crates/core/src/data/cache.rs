use std::path::Path;

use super::StreamStep;
use crate::columnar::ColumnFile;
use crate::error::{LtError, Result};

pub const STREAM_SCHEMA: &str = "latenttrack.stream/1";

/// Writes a stream in the shared columnar format (`t,y,x0..x{d-1}`).
pub fn write_stream_cache(path: &Path, steps: &[StreamStep], meta: &[(&str, String)]) -> Result<()> {
    let d = steps.first().map_or(0, |s| s.x.len());
    let mut header = vec!["t".to_string(), "y".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    let mut f = ColumnFile::new(STREAM_SCHEMA, header);
    for (k, v) in meta {
        f = f.with_meta(k, v);
    }
    for s in steps {
        let mut row = vec![s.t as f64, s.y];
        row.extend_from_slice(&s.x);
        f.push(row);
    }
    f.write(path)
}

pub fn read_stream_cache(path: &Path) -> Result<(Vec<StreamStep>, ColumnFile)> {
    let f = ColumnFile::read(path)?;
    if f.schema != STREAM_SCHEMA {
        return Err(LtError::Incompatible(format!(
            "stream cache schema `{}` (expected `{STREAM_SCHEMA}`)",
            f.schema
        )));
    }
    let steps = f
        .rows
        .iter()
        .map(|r| StreamStep {
            t: r[0] as usize,
            y: r[1],
            x: r[2..].to_vec(),
        })
        .collect();
    Ok((steps, f))
}
