//! Columnar text files: `#` comment lines (schema tag, then `key=value`
//! metadata), a comma-separated header, and one row per record.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is lossless and re-emission is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LtError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnFile {
    pub schema: String,
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ColumnFile {
    pub fn new(schema: &str, header: Vec<String>) -> Self {
        Self {
            schema: schema.to_string(),
            meta: Vec::new(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# schema={}", self.schema);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = None;
        let mut meta = Vec::new();
        let mut header: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                let (k, v) = comment.trim().split_once('=').ok_or_else(|| LtError::Parse {
                    line: line_no,
                    msg: "comment without key=value".into(),
                })?;
                if k == "schema" {
                    schema = Some(v.to_string());
                } else {
                    meta.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            match &header {
                None => header = Some(line.split(',').map(str::to_string).collect()),
                Some(h) => {
                    let row = line
                        .split(',')
                        .map(|c| {
                            c.parse::<f64>().map_err(|_| LtError::Parse {
                                line: line_no,
                                msg: format!("non-numeric cell `{c}`"),
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    if row.len() != h.len() {
                        return Err(LtError::Parse {
                            line: line_no,
                            msg: format!("expected {} fields, found {}", h.len(), row.len()),
                        });
                    }
                    rows.push(row);
                }
            }
        }
        Ok(Self {
            schema: schema.ok_or_else(|| LtError::Parse {
                line: 1,
                msg: "missing schema line".into(),
            })?,
            meta,
            header: header.ok_or_else(|| LtError::Parse {
                line: 1,
                msg: "missing header".into(),
            })?,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
