//! Two-file checkpoints: a JSON manifest and a sibling `.bin` payload of
//! little-endian f64 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "sleepyco-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    dtype: String,
    payload: String,
    #[serde(default)]
    metadata: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `tensors` to `path` (manifest) and `path` with a `.bin` extension.
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: serde_json::Value) -> Result<()> {
    let bin_path = payload_path(path);
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        dtype: "f64-le".to_string(),
        payload: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metadata,
        entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin_path, &payload).map_err(|e| Error::io(&bin_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save`], returning the tensors and the
/// free-form metadata.
pub fn load(path: &Path) -> Result<(BTreeMap<String, Tensor>, serde_json::Value)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unsupported format tag {:?}, expected {FORMAT_TAG:?}",
            manifest.format
        )));
    }
    if manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let bin_path = path.with_file_name(&manifest.payload);
    let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut out = BTreeMap::new();
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "entry {} spans bytes {start}..{end} but payload has {}",
                e.name,
                payload.len()
            )));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((out, manifest.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut m = BTreeMap::new();
        m.insert("a.weight".to_string(), Tensor::new(vec![2, 2], vec![0.1, -2.5, 1e-300, f64::MAX]).unwrap());
        m.insert("b".to_string(), Tensor::scalar(std::f64::consts::PI));
        save(&path, &m, serde_json::json!({"k": 1})).unwrap();
        let (back, meta) = load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["k"], 1);
    }

    #[test]
    fn rejects_foreign_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save(&path, &BTreeMap::new(), serde_json::Value::Null).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace(FORMAT_TAG, "other/9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
