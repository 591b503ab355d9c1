//! The two-stage protocol wired to data on disk: dataset synthesis,
//! pretraining, sequence training, scoring and k-fold cross-validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::{blob_hash, tree_hash, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{confusion, render_report, FoldResult, MetricsReport};
use crate::model::{is_sequence_model_param, Model, BACKBONE_PREFIX, PROJECTOR_PREFIX};
use crate::signal::dataset::{load_dataset, write_subject};
use crate::signal::synth::synth_dataset;
use crate::signal::{kfold_split, FoldSplit, Subject};
use crate::tensor::{checkpoint, Tensor};
use crate::train::{calibrate_batchnorm, evaluate_sequences, run_crl, run_mtcl, CrlOutcome, MtclOutcome, TrainLog};

pub const CRL_CHECKPOINT: &str = "crl.json";
pub const MTCL_CHECKPOINT: &str = "mtcl.json";

/// Seed of fold `fold`, so folds never share random streams.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Writes the configured synthetic dataset under `root`; returns the ids.
pub fn write_synth_dataset(cfg: &RunConfig, root: &Path) -> Result<Vec<String>> {
    let subjects = synth_dataset(cfg.seed, cfg.synth.subjects, cfg.synth.epochs_per_subject);
    for s in &subjects {
        let labels: Vec<&str> = s.stages.iter().map(|st| st.name()).collect();
        write_subject(root, &s.id, &s.samples, &labels, cfg.data.format, &cfg.data.channel)?;
    }
    Ok(subjects.into_iter().map(|s| s.id).collect())
}

pub fn load_subjects(cfg: &RunConfig) -> Result<Vec<Subject>> {
    load_dataset(&cfg.data_root()?, cfg.data.format, &cfg.data.channel)
}

pub fn splits(cfg: &RunConfig, subjects: &[Subject]) -> Result<Vec<FoldSplit>> {
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    kfold_split(&ids, cfg.crossval.k, cfg.crossval.n_val, cfg.seed)
}

/// The subjects named by `ids`, in that order.
pub fn select<'a>(subjects: &'a [Subject], ids: &[String]) -> Result<Vec<Subject>> {
    let by_id: BTreeMap<&str, &'a Subject> = subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::EmptyData(format!("subject `{id}` is not in the dataset")))
        })
        .collect()
}

fn is_pretrained(name: &str) -> bool {
    name.starts_with(BACKBONE_PREFIX) || name.starts_with(PROJECTOR_PREFIX)
}

fn metadata(cfg: &RunConfig, stage: &str) -> serde_json::Value {
    json!({ "stage": stage, "model": cfg.model })
}

pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>, cfg: &RunConfig, stage: &str) -> Result<()> {
    checkpoint::save(path, tensors, metadata(cfg, stage))
}

/// Loads the backbone (and projection head, if present) of a pretraining
/// checkpoint into `model`.
pub fn load_backbone(model: &mut Model, path: &Path) -> Result<()> {
    let (tensors, _) = checkpoint::load(path)?;
    if tensors.keys().any(|k| k.starts_with(PROJECTOR_PREFIX)) {
        model.store.restore_where(is_pretrained, &tensors)
    } else {
        model.store.restore(BACKBONE_PREFIX, &tensors)
    }
}

/// Loads a sequence-model checkpoint into `model`.
pub fn load_sequence_model(model: &mut Model, path: &Path) -> Result<()> {
    let (tensors, _) = checkpoint::load(path)?;
    model.store.restore_where(is_sequence_model_param, &tensors)
}

fn log_for(cfg: &RunConfig) -> TrainLog {
    TrainLog {
        echo: cfg.train.verbose,
        ..Default::default()
    }
}

/// Pretraining; writes the checkpoint and its log into `out`.
pub fn pretrain(cfg: &RunConfig, model: &mut Model, train: &[Subject], val: &[Subject], seed: u64, out: &Path) -> Result<CrlOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = log_for(cfg);
    let outcome = run_crl(model, train, val, &cfg.augmentation, &cfg.train, seed, &mut log)?;
    log.write_csv(&out.join("crl_log.csv"))?;
    save_checkpoint(&out.join(CRL_CHECKPOINT), &outcome.checkpoint, cfg, "crl")?;
    Ok(outcome)
}

/// Normalization statistics for a backbone that skipped pretraining.
pub fn calibrate(cfg: &RunConfig, model: &mut Model, train: &[Subject], seed: u64) -> Result<()> {
    calibrate_batchnorm(model, train, cfg.crossval.calibration_batches, cfg.train.batch_crl, seed)
}

/// Sequence training over the loaded backbone; writes the checkpoint and
/// its log into `out`.
pub fn finetune(cfg: &RunConfig, model: &mut Model, train: &[Subject], val: &[Subject], seed: u64, out: &Path) -> Result<MtclOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = log_for(cfg);
    let outcome = run_mtcl(model, train, val, &cfg.train, seed, &mut log)?;
    log.write_csv(&out.join("mtcl_log.csv"))?;
    save_checkpoint(&out.join(MTCL_CHECKPOINT), &outcome.checkpoint, cfg, "mtcl")?;
    Ok(outcome)
}

/// Scores every sequence of `subjects`; the hypnogram is the first
/// subject's.
pub fn score(cfg: &RunConfig, model: &Model, subjects: &[Subject], name: &str) -> Result<FoldResult> {
    let ev = evaluate_sequences(model, subjects, cfg.train.pad_head, 0, cfg.train.frozen_bn)?;
    let cm = confusion(&ev.preds, &ev.labels)?;
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (i, &(s, _)) in ev.refs.iter().enumerate() {
        if s == 0 {
            truth.push(ev.labels[i]);
            pred.push(ev.preds[i]);
        }
    }
    Ok(FoldResult {
        name: name.to_string(),
        confusion: cm,
        hypnogram: Some((subjects[0].id.clone(), truth, pred)),
    })
}

/// One fold of the protocol: pretrain (or calibrate), train the
/// classifier, score the test subjects. Artifacts go to `out`.
pub fn run_fold(cfg: &RunConfig, subjects: &[Subject], split: &FoldSplit, out: &Path) -> Result<FoldResult> {
    let seed = fold_seed(cfg.seed, split.fold_index);
    let train = select(subjects, &split.train)?;
    let val = select(subjects, &split.validation)?;
    let test = select(subjects, &split.test)?;
    let mut model = Model::new(cfg.model.clone(), seed)?;
    if cfg.crossval.skip_crl {
        calibrate(cfg, &mut model, &train, seed)?;
    } else {
        pretrain(cfg, &mut model, &train, &val, seed, out)?;
    }
    finetune(cfg, &mut model, &train, &val, seed, out)?;
    score(cfg, &model, &test, &format!("fold{}", split.fold_index))
}

/// Every fold, optionally `jobs` at a time, then the pooled report in
/// `out`. Results do not depend on `jobs`.
pub fn crossval(cfg: &RunConfig, subjects: &[Subject], out: &Path, jobs: usize) -> Result<MetricsReport> {
    let folds = splits(cfg, subjects)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dirs: Vec<PathBuf> = folds.iter().map(|f| out.join(format!("fold{}", f.fold_index))).collect();
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in folds.chunks(jobs).enumerate() {
        let base = chunk_idx * jobs;
        let outcomes: Vec<Result<FoldResult>> = if chunk.len() == 1 {
            vec![run_fold(cfg, subjects, &chunk[0], &dirs[base])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let dir = &dirs[base + i];
                        s.spawn(move || run_fold(cfg, subjects, f, dir))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
            })
        };
        for (i, r) in outcomes.into_iter().enumerate() {
            results[base + i] = Some(r);
        }
    }
    let results: Vec<FoldResult> = results.into_iter().map(|r| r.expect("every fold ran")).collect::<Result<_>>()?;
    fs::write(out.join("folds.json"), serde_json::to_string_pretty(&folds)?).map_err(|e| Error::io(out, e))?;
    render_report(&results, out)
}

/// Writes `resolved_config.json` and `inputs.json`: the git-style hash of
/// the resolved config and every input file, plus their combined tree hash.
pub fn write_provenance(cfg: &RunConfig, out: &Path, subcommand: &str, inputs: &[PathBuf]) -> Result<String> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = serde_json::to_string_pretty(cfg)?;
    let path = out.join("resolved_config.json");
    fs::write(&path, &resolved).map_err(|e| Error::io(&path, e))?;
    let mut entries = vec![("resolved_config.json".to_string(), blob_hash(resolved.as_bytes()))];
    for p in inputs {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        entries.push((p.display().to_string(), blob_hash(&bytes)));
    }
    let tree = tree_hash(&entries);
    let files: BTreeMap<&str, &str> = entries.iter().map(|(n, h)| (n.as_str(), h.as_str())).collect();
    let doc = json!({
        "subcommand": subcommand,
        "version": env!("CARGO_PKG_VERSION"),
        "input_hash": tree,
        "files": files,
    });
    let path = out.join("inputs.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))?;
    Ok(tree)
}

/// Every regular file under `root`, sorted, for input hashing.
pub fn dataset_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|err| Error::io(&dir, err))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
