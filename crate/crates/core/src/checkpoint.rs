//! Checkpoint format shared by base models, adapters and hypernetworks.
//!
//! `<name>.json` is a manifest listing every named array with its shape,
//! dtype and byte offset; `<name>.bin` holds the arrays back to back as raw
//! little-endian scalars.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::real::{Dtype, Real};
use crate::tensor::Tensor;

pub const FORMAT: &str = "lwtta-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the sidecar.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub dtype: Dtype,
    pub data_file: String,
    #[serde(default)]
    pub meta: Value,
    pub arrays: Vec<ArrayEntry>,
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save<S: Real>(path: &Path, kind: &str, meta: Value, arrays: &[(String, &Tensor<S>)]) -> Result<()> {
    let bin_path = sidecar_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        dtype: S::DTYPE,
        data_file: bin_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad path {}", path.display())))?
            .to_string(),
        meta,
        arrays: entries,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&bin_path, bytes)?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// A loaded checkpoint, converted to the caller's precision.
#[derive(Debug, Clone)]
pub struct Loaded<S> {
    pub manifest: Manifest,
    pub arrays: Vec<(String, Tensor<S>)>,
}

impl<S: Real> Loaded<S> {
    /// Remove and return the array called `name`, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<S>> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        let (_, t) = self.arrays.remove(pos);
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }
}

pub fn load<S: Real>(path: &Path, expected_kind: &str) -> Result<Loaded<S>> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    if manifest.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "expected a `{expected_kind}` checkpoint, found `{}`",
            manifest.kind
        )));
    }
    let bin_path = path.with_file_name(&manifest.data_file);
    let bytes = std::fs::read(&bin_path)?;
    let width = manifest.dtype.size_of();
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * width;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "array `{}` runs past the end of {}",
                entry.name,
                bin_path.display()
            )));
        }
        let raw = &bytes[entry.offset..end];
        let data: Vec<S> = match manifest.dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|c| S::lit(f32::read_le(c) as f64)).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| S::lit(f64::read_le(c))).collect(),
        };
        arrays.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Loaded { manifest, arrays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn save_load_round_trip_and_shape_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-300]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3], &[0.0, 7.0, -0.0]).unwrap();
        save(&path, "demo", json!({"k": 1}), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        assert!(dir.path().join("ck.bin").exists());

        let mut loaded = load::<f64>(&path, "demo").unwrap();
        assert_eq!(loaded.manifest.meta, json!({"k": 1}));
        assert_eq!(loaded.take("a", &[2, 2]).unwrap(), a);
        assert!(loaded.take("b", &[4]).is_err());
        assert!(load::<f64>(&path, "other").is_err());
    }

    #[test]
    fn f32_checkpoint_loads_into_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let a = Tensor::<f32>::from_f64(&[2], &[0.5, -1.25]).unwrap();
        save(&path, "demo", Value::Null, &[("a".into(), &a)]).unwrap();
        let bin = std::fs::read(dir.path().join("w.bin")).unwrap();
        assert_eq!(bin, [0.5f32.to_le_bytes(), (-1.25f32).to_le_bytes()].concat());
        let mut loaded = load::<f64>(&path, "demo").unwrap();
        assert_eq!(loaded.take("a", &[2]).unwrap().data(), &[0.5, -1.25]);
    }
}
