use std::path::Path;

use crate::columnar::ColumnFile;
use crate::error::{invalid, LtError, Result};
use crate::mixture::Mixture;

pub const METRICS_SCHEMA: &str = "latenttrack.metrics/1";

const COLUMNS: [&str; 9] = ["t", "y", "mix_mean", "var_alea", "var_epi", "var_tot", "nll", "mse", "pit"];

/// Per-step evaluation record of one run, with its manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSeries {
    pub t: Vec<usize>,
    pub y: Vec<f64>,
    pub mean: Vec<f64>,
    pub var_alea: Vec<f64>,
    pub var_epi: Vec<f64>,
    pub var_tot: Vec<f64>,
    pub nll: Vec<f64>,
    pub mse: Vec<f64>,
    /// Mixture CDF at the realized target.
    pub pit: Vec<f64>,
    pub manifest: Vec<(String, String)>,
}

impl MetricSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, t: usize, y: f64, mix: &Mixture) {
        let s = mix.summary();
        self.t.push(t);
        self.y.push(y);
        self.mean.push(s.mean);
        self.var_alea.push(s.var_aleatoric);
        self.var_epi.push(s.var_epistemic);
        self.var_tot.push(s.var_total);
        self.nll.push(mix.nll(y));
        self.mse.push((y - s.mean).powi(2));
        self.pit.push(mix.cdf(y));
    }

    pub fn manifest(&self, key: &str) -> Option<&str> {
        self.manifest
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_manifest(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.manifest.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.manifest.push((key.to_string(), value)),
        }
    }

    /// Steps whose NLL is not finite.
    pub fn non_finite_nll(&self) -> usize {
        self.nll.iter().filter(|v| !v.is_finite()).count()
    }

    pub fn to_columns(&self) -> ColumnFile {
        let mut f = ColumnFile::new(METRICS_SCHEMA, COLUMNS.iter().map(|s| s.to_string()).collect());
        f.meta = self.manifest.clone();
        for i in 0..self.len() {
            f.push(vec![
                self.t[i] as f64,
                self.y[i],
                self.mean[i],
                self.var_alea[i],
                self.var_epi[i],
                self.var_tot[i],
                self.nll[i],
                self.mse[i],
                self.pit[i],
            ]);
        }
        f
    }

    pub fn from_columns(f: &ColumnFile) -> Result<Self> {
        if f.schema != METRICS_SCHEMA {
            return Err(LtError::Incompatible(format!(
                "expected schema {METRICS_SCHEMA}, found {}",
                f.schema
            )));
        }
        let col = |name: &str| f.column(name).ok_or_else(|| LtError::MissingColumn(name.to_string()));
        let t = col("t")?;
        if t.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(invalid("step column must hold non-negative integers"));
        }
        Ok(Self {
            t: t.into_iter().map(|v| v as usize).collect(),
            y: col("y")?,
            mean: col("mix_mean")?,
            var_alea: col("var_alea")?,
            var_epi: col("var_epi")?,
            var_tot: col("var_tot")?,
            nll: col("nll")?,
            mse: col("mse")?,
            pit: col("pit")?,
            manifest: f.meta.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_columns().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_columns(&ColumnFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persistence_round_trip() {
        let mut s = MetricSeries::default();
        s.set_manifest("model", "vrnn");
        s.set_manifest("seed", 3);
        s.push(10, 1.5, &Mixture::new(vec![1.0, 2.1], vec![-0.3, 0.2]));
        s.push(11, -0.25, &Mixture::single(0.1, -12.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        s.write(&path).unwrap();
        let back = MetricSeries::read(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.manifest("seed"), Some("3"));
    }

    #[test]
    fn totals_are_exact_sums() {
        let mut s = MetricSeries::default();
        s.push(0, 0.3, &Mixture::new(vec![0.1, 0.7, -0.2], vec![0.0, -1.0, 0.5]));
        assert_eq!(s.var_tot[0], s.var_alea[0] + s.var_epi[0]);
    }
}
