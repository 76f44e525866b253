//! Parameter checkpoints: a text manifest listing every tensor's name and
//! shape, plus the concatenated values as little-endian `f64`.

use std::fmt::Write as _;
use std::path::Path;

use lt_autodiff::ParamSet;

use crate::error::{LtError, Result};

pub const CHECKPOINT_SCHEMA: &str = "latenttrack.checkpoint/1";
pub const MANIFEST_FILE: &str = "checkpoint.txt";
pub const BLOB_FILE: &str = "checkpoint.bin";

fn describe(sets: &[&ParamSet]) -> Vec<String> {
    let mut lines = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        for (_, name, t) in set.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            lines.push(format!("tensor {i} {name} {}", shape.join("x")));
        }
    }
    lines
}

/// Writes the manifest (with `meta` as `key = value` lines) and blob into `dir`.
pub fn save_checkpoint(dir: &Path, sets: &[&ParamSet], meta: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = format!("# {CHECKPOINT_SCHEMA}\n");
    for (k, v) in meta {
        let _ = writeln!(text, "meta {k} = {v}");
    }
    for line in describe(sets) {
        text.push_str(&line);
        text.push('\n');
    }
    let blob: Vec<u8> = sets
        .iter()
        .flat_map(|s| s.flat_values())
        .flat_map(f64::to_le_bytes)
        .collect();
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Loads values into `sets`, which must have the saved names and shapes.
/// Returns the manifest metadata.
pub fn load_checkpoint(dir: &Path, sets: &mut [&mut ParamSet]) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = text.lines();
    if lines.next() != Some(&format!("# {CHECKPOINT_SCHEMA}")) {
        return Err(LtError::Incompatible(format!("{} is not a {CHECKPOINT_SCHEMA} manifest", dir.display())));
    }
    let mut meta = Vec::new();
    let mut saved = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("meta ") {
            if let Some((k, v)) = rest.split_once(" = ") {
                meta.push((k.to_string(), v.to_string()));
            }
        } else if line.starts_with("tensor ") {
            saved.push(line.to_string());
        }
    }
    let expected = describe(&sets.iter().map(|s| &**s).collect::<Vec<_>>());
    if saved != expected {
        let first = saved
            .iter()
            .zip(&expected)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("saved `{a}`, model has `{b}`"))
            .unwrap_or_else(|| format!("saved {} tensors, model has {}", saved.len(), expected.len()));
        return Err(LtError::Incompatible(format!("checkpoint does not fit the model: {first}")));
    }
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    let total: usize = sets.iter().map(|s| s.numel()).sum();
    if blob.len() != 8 * total {
        return Err(LtError::Incompatible(format!(
            "checkpoint blob holds {} bytes, expected {}",
            blob.len(),
            8 * total
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut offset = 0;
    for set in sets.iter_mut() {
        let n = set.numel();
        set.set_flat_values(&values[offset..offset + n])?;
        offset += n;
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{LtDims, LtModel, LtVariant};
    use crate::model::SequentialModel;

    fn model(seed: u64, embed: usize) -> LtModel {
        LtModel::new(
            LtVariant::Unstructured,
            LtDims {
                x_dim: 3,
                embed,
                hidden: 5,
                latent: 2,
                predictor_hidden: 4,
            },
            seed,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = model(1, 4);
        let mut b = model(2, 4);
        assert_ne!(a.params().flat_values(), b.params().flat_values());
        let dir = tempfile::tempdir().unwrap();
        let meta = vec![("seed".to_string(), "1".to_string())];
        save_checkpoint(dir.path(), &[a.params()], &meta).unwrap();
        let back = load_checkpoint(dir.path(), &mut [b.params_mut()]).unwrap();
        assert_eq!(back, meta);
        assert_eq!(a.params().flat_values(), b.params().flat_values());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = model(1, 4);
        let mut b = model(1, 5);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &[a.params()], &[]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), &mut [b.params_mut()]),
            Err(LtError::Incompatible(_))
        ));
    }
}
