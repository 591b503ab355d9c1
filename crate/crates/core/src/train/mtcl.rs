use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evenly_spaced, mtcl_loss, EarlyStopState, FrozenBn, Sampler, StopSignal, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::model::{
    apply_bn_updates, is_sequence_model_param, predict_stage, BnMode, Ctx, Model, BACKBONE_PREFIX, PROJECTOR_PREFIX,
};
use crate::signal::sequences::{targets, window};
use crate::signal::{PadHead, Subject, EPOCH_SAMPLES};
use crate::tensor::{AdamState, Graph, Tensor, Var};

const SAMPLE_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const CALIBRATION_STREAM: u64 = 5;
/// Sequences per evaluation forward pass.
const EVAL_CHUNK: usize = 4;

#[derive(Clone, Debug)]
pub struct MtclOutcome {
    /// Sequence-model tensors (no projection head) at the lowest
    /// validation loss.
    pub checkpoint: BTreeMap<String, Tensor>,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub best_iteration: usize,
    /// `(loss, accuracy)` per validation step.
    pub val_history: Vec<(f64, f64)>,
    pub iterations: usize,
    pub early_stopped: bool,
}

/// The `L` epochs ending at `target`, back to back.
pub fn sequence_input(sub: &Subject, target: usize, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l * EPOCH_SAMPLES);
    for e in window(target, l) {
        out.extend_from_slice(sub.epoch(e));
    }
    out
}

pub(crate) fn sequence_refs(subjects: &[Subject], l: usize, pad: PadHead) -> Vec<(usize, usize)> {
    subjects
        .iter()
        .enumerate()
        .flat_map(|(s, sub)| targets(sub.n_epochs(), l, pad).map(move |t| (s, t)))
        .collect()
}

fn frozen_mode(f: FrozenBn) -> BnMode {
    match f {
        FrozenBn::Running => BnMode::Running,
        FrozenBn::Batch => BnMode::Batch { update: false },
    }
}

fn batch_input(subjects: &[Subject], refs: &[(usize, usize)], l: usize) -> Result<Tensor> {
    let data = refs.iter().flat_map(|&(s, t)| sequence_input(&subjects[s], t, l)).collect();
    Tensor::new(vec![refs.len(), 1, l * EPOCH_SAMPLES], data)
}

/// Per-level logits for `x` with the backbone evaluated off-graph.
fn classifier_logits(model: &Model, g: &mut Graph, ctx: &mut Ctx, x: &Tensor, bn: BnMode) -> Result<Vec<Var>> {
    let taps = model.backbone_taps_detached(x, bn)?;
    let taps = taps.into_iter().map(|(s, t)| (s, g.constant(t))).collect();
    Ok(model.classifier.forward(g, ctx, &taps)?.into_iter().map(|l| l.logits).collect())
}

fn predictions(g: &Graph, logits: &[Var], n: usize, classes: usize) -> Result<Vec<usize>> {
    (0..n)
        .map(|i| {
            let rows: Vec<&[f64]> = logits.iter().map(|&o| &g.value(o).data()[i * classes..(i + 1) * classes]).collect();
            predict_stage(&rows)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEval {
    /// Mean sequence loss (summed over levels).
    pub loss: f64,
    pub accuracy: f64,
    /// `(subject index, target epoch)` of every scored sequence.
    pub refs: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub preds: Vec<usize>,
}

/// Scores every sequence of `subjects` (at most `cap`, evenly spaced) in
/// evaluation mode.
pub fn evaluate_sequences(model: &Model, subjects: &[Subject], pad: PadHead, cap: usize, frozen: FrozenBn) -> Result<SequenceEval> {
    let l = model.cfg.seq_len;
    let refs = evenly_spaced(&sequence_refs(subjects, l, pad), cap);
    if refs.is_empty() {
        return Err(Error::EmptyData("no sequences to evaluate".into()));
    }
    let bn = frozen_mode(frozen);
    // batch statistics are taken per sequence, as in training
    let chunk = if frozen == FrozenBn::Batch { 1 } else { EVAL_CHUNK };
    let (mut total, mut labels, mut preds) = (0.0, Vec::new(), Vec::new());
    for part in refs.chunks(chunk) {
        let x = batch_input(subjects, part, l)?;
        let y: Vec<usize> = part.iter().map(|&(s, t)| subjects[s].stages[t].index()).collect();
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&model.store);
        let logits = classifier_logits(model, &mut g, &mut ctx, &x, bn)?;
        let loss = mtcl_loss(&mut g, &logits, &y)?;
        total += g.value(loss).item() * part.len() as f64;
        preds.extend(predictions(&g, &logits, part.len(), model.cfg.n_classes)?);
        labels.extend(y);
    }
    let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(SequenceEval {
        loss: total / refs.len() as f64,
        accuracy: correct as f64 / refs.len() as f64,
        refs,
        labels,
        preds,
    })
}

/// Estimates backbone running statistics from unaugmented training epochs
/// without touching any parameter; used when a backbone skips
/// pretraining and so never collected them.
pub fn calibrate_batchnorm(model: &mut Model, subjects: &[Subject], batches: usize, batch: usize, seed: u64) -> Result<()> {
    let refs: Vec<(usize, usize)> = subjects
        .iter()
        .enumerate()
        .flat_map(|(s, sub)| (0..sub.n_epochs()).map(move |e| (s, e)))
        .collect();
    if refs.is_empty() {
        return Err(Error::EmptyData("no epochs to calibrate batch norm".into()));
    }
    let mut sampler = Sampler::new(refs, seed, CALIBRATION_STREAM);
    for _ in 0..batches {
        let part = sampler.next_batch(batch);
        let x = batch_input(subjects, &part, 1)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = Ctx::eval(&model.store);
        ctx.bn = BnMode::Batch { update: true };
        model.backbone.forward(&mut g, &mut ctx, xv)?;
        let updates = std::mem::take(&mut ctx.bn_updates);
        apply_bn_updates(&mut model.store, &updates, model.cfg.bn_momentum);
    }
    Ok(())
}

/// Sequence training of the classifier over the frozen backbone, with each
/// iteration's gradient accumulated one sequence at a time. The model is
/// left holding the lowest-validation-loss weights.
pub fn run_mtcl(model: &mut Model, train: &[Subject], val: &[Subject], cfg: &TrainConfig, seed: u64, log: &mut TrainLog) -> Result<MtclOutcome> {
    cfg.validate()?;
    let l = model.cfg.seq_len;
    let refs = sequence_refs(train, l, cfg.pad_head);
    if refs.is_empty() {
        return Err(Error::EmptyData("sequence training set has no sequences".into()));
    }
    if sequence_refs(val, l, cfg.pad_head).is_empty() {
        return Err(Error::EmptyData("sequence validation set has no sequences".into()));
    }
    model.store.set_frozen(BACKBONE_PREFIX, true);
    model.store.set_frozen(PROJECTOR_PREFIX, true);
    let result = mtcl_loop(model, train, val, cfg, seed, log, refs);
    model.store.set_frozen(BACKBONE_PREFIX, false);
    model.store.set_frozen(PROJECTOR_PREFIX, false);
    result
}

fn mtcl_loop(
    model: &mut Model,
    train: &[Subject],
    val: &[Subject],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut TrainLog,
    refs: Vec<(usize, usize)>,
) -> Result<MtclOutcome> {
    let l = model.cfg.seq_len;
    let classes = model.cfg.n_classes;
    let bn = frozen_mode(cfg.frozen_bn);
    let mut sampler = Sampler::new(refs, seed, SAMPLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut adam = AdamState::new(cfg.adam(cfg.eta_mtcl.unwrap_or(cfg.eta)));
    let mut stop = EarlyStopState::new(cfg.phi);
    let mut best: Option<(BTreeMap<String, Tensor>, usize, f64)> = None;
    let mut val_history = Vec::new();
    let mut early_stopped = false;
    let mut it = 0;
    while it < cfg.max_iters_mtcl {
        it += 1;
        let batch = sampler.next_batch(cfg.batch_mtcl);
        let scale = 1.0 / batch.len() as f64;
        model.store.zero_grad();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for &(s, t) in &batch {
            let x = batch_input(train, &[(s, t)], l)?;
            let y = [train[s].stages[t].index()];
            let mut g = Graph::new();
            {
                let mut ctx = Ctx::train(&model.store, &mut dropout_rng);
                let logits = classifier_logits(model, &mut g, &mut ctx, &x, bn)?;
                let loss = mtcl_loss(&mut g, &logits, &y)?;
                loss_sum += g.value(loss).item();
                if predictions(&g, &logits, 1, classes)?[0] == y[0] {
                    correct += 1;
                }
                let scaled = g.scale(loss, scale);
                g.backward(scaled)?;
            }
            g.accumulate_param_grads(&mut model.store);
        }
        adam.step(&mut model.store)?;
        log.push(it, "train", loss_sum * scale, Some(correct as f64 * scale));

        let last = it == cfg.max_iters_mtcl;
        if it % cfg.psi2 == 0 || (last && val_history.is_empty()) {
            let ev = evaluate_sequences(model, val, cfg.pad_head, cfg.max_val_items, cfg.frozen_bn)?;
            val_history.push((ev.loss, ev.accuracy));
            log.push(it, "val", ev.loss, Some(ev.accuracy));
            match stop.update(ev.loss)? {
                StopSignal::Improved => best = Some((model.store.snapshot_where(is_sequence_model_param), it, ev.accuracy)),
                StopSignal::Continue => {}
                StopSignal::Stop => {
                    early_stopped = true;
                    break;
                }
            }
        }
    }
    let (checkpoint, best_iteration, best_val_accuracy) =
        best.ok_or_else(|| Error::EmptyData("no validation step completed".into()))?;
    model.store.restore_where(is_sequence_model_param, &checkpoint)?;
    Ok(MtclOutcome {
        checkpoint,
        best_val_loss: stop.best_val_loss,
        best_val_accuracy,
        best_iteration,
        val_history,
        iterations: it,
        early_stopped,
    })
}
