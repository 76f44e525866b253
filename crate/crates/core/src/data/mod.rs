//! Streams of `(x_t, y_t)` observations: the Jena Climate table and synthetic
//! nonstationary generators.

mod cache;
mod jena;
mod synth;

pub use cache::{read_stream_cache, write_stream_cache, STREAM_SCHEMA};
pub use jena::{
    build_stream, downsample, load_jena, load_jena_str, BuiltStream, NormStats, RawTable,
    StreamOptions,
};
pub use synth::{synth_stream, SynthKind, SynthOptions, SynthStream};

use sha2::{Digest, Sha256};

/// One observation with its known covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStep {
    pub t: usize,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Chronological train/evaluation split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// First evaluation index; `[0, boundary)` is training data.
    pub boundary: usize,
}

impl SplitSpec {
    pub fn new(len: usize, train_fraction: f64) -> Self {
        Self {
            train_fraction,
            boundary: (train_fraction * len as f64).floor() as usize,
        }
    }

    pub fn split<'a>(&self, steps: &'a [StreamStep]) -> (&'a [StreamStep], &'a [StreamStep]) {
        steps.split_at(self.boundary.min(steps.len()))
    }
}

/// Content hash of a stream; runs are only comparable when these agree.
pub fn stream_hash(steps: &[StreamStep]) -> String {
    let mut h = Sha256::new();
    for s in steps {
        h.update((s.t as u64).to_le_bytes());
        h.update(s.y.to_le_bytes());
        for v in &s.x {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..16])
}
