//! Run configuration: one JSON document, every key defaulted, unknown keys
//! rejected, dotted-path overrides applied before parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::signal::DataFormat;
use crate::train::TrainConfig;

/// Environment variable naming the dataset root when `data.root` is unset.
pub const DATA_ENV: &str = "SLEEPYCO_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub format: DataFormat,
    /// EDF signal label to read; ignored for raw files.
    pub channel: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            format: DataFormat::Edf,
            channel: "Fpz-Cz".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub epochs_per_subject: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 12,
            epochs_per_subject: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub k: usize,
    /// Held-out validation subjects per fold.
    pub n_val: usize,
    /// Train the classifier over a randomly initialized backbone.
    pub skip_crl: bool,
    /// Batches used to estimate normalization statistics when pretraining
    /// is skipped.
    pub calibration_batches: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig {
            k: 10,
            n_val: 7,
            skip_crl: false,
            calibration_batches: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub synth: SynthConfig,
    pub crossval: CrossvalConfig,
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augmentation.validate()?;
        if self.crossval.k < 2 || self.crossval.n_val < 1 {
            return Err(Error::Config {
                key: "crossval.k".into(),
                detail: format!("need k >= 2 and n_val >= 1, got k={}, n_val={}", self.crossval.k, self.crossval.n_val),
            });
        }
        if self.synth.subjects == 0 || self.synth.epochs_per_subject == 0 {
            return Err(Error::Config {
                key: "synth.subjects".into(),
                detail: "synthetic dataset needs at least one subject and one epoch".into(),
            });
        }
        Ok(())
    }

    /// Dataset root from the config, else from [`DATA_ENV`].
    pub fn data_root(&self) -> Result<PathBuf> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config {
                key: "data.root".into(),
                detail: format!("not set and ${DATA_ENV} is empty"),
            })
    }
}

/// Sets `path` (dot separated) inside `doc`, creating objects on the way.
/// `raw` is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config {
            key: path.to_string(),
            detail: "override path has an empty segment".into(),
        });
    }
    let mut cur = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => {
                return Err(Error::Config {
                    key: keys[..i].join("."),
                    detail: "is not an object".into(),
                })
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("override path has at least one segment")
}

/// Parses config text after applying `key=value` overrides, then validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = if text.trim().is_empty() { Value::Object(Default::default()) } else { serde_json::from_str(text)? };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            key: o.clone(),
            detail: "override must look like key=value".into(),
        })?;
        apply_override(&mut doc, k.trim(), v.trim())?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| Error::Config {
        key: e.path().to_string(),
        detail: e.inner().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

/// Git-style object id over SHA-256: the digest of `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash over `(name, blob hash)` entries sorted by name, like a tree object.
pub fn tree_hash(entries: &[(String, String)]) -> String {
    let mut sorted = entries.to_vec();
    sorted.sort();
    let mut body = Vec::new();
    for (name, hash) in &sorted {
        body.extend_from_slice(format!("{hash} {name}\n").as_bytes());
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", body.len()).as_bytes());
    h.update(&body);
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let cfg = parse_config("{}", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.tau, 0.07);
        assert_eq!(cfg.model.d_m, 128);
        assert_eq!(cfg.model.seq_len, 10);
        assert_eq!(cfg.train.eta, 1e-4);
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = parse_config(r#"{"train":{"phi":5}}"#, &[]).unwrap();
        assert_eq!(cfg.train.phi, 5);
        assert_eq!(cfg.train, TrainConfig { phi: 5, ..Default::default() });
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(r#"{"modle":{}}"#, &[]).unwrap_err().to_string();
        assert!(err.contains("modle"), "{err}");
        let err = parse_config(r#"{"train":{"psi3":1}}"#, &[]).unwrap_err().to_string();
        assert!(err.contains("psi3"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_path() {
        let err = parse_config(r#"{"train":{"phi":"many"}}"#, &[]).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "train.phi"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn range_error_names_the_key() {
        let err = parse_config(r#"{"model":{"dropout":1.5}}"#, &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "model.dropout"), "{err}");
    }

    #[test]
    fn dotted_overrides() {
        let sets = ["train.phi=3".to_string(), "model.taps=[5]".into(), "data.channel=C4-A1".into()];
        let cfg = parse_config("{}", &sets).unwrap();
        assert_eq!(cfg.train.phi, 3);
        assert_eq!(cfg.model.taps, vec![5]);
        assert_eq!(cfg.data.channel, "C4-A1");
        assert!(parse_config("{}", &["train.nope=1".into()]).is_err());
        assert!(parse_config("{}", &["seed".into()]).is_err());
    }

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }
}
