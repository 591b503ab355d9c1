use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evenly_spaced, EarlyStopState, Sampler, StopSignal, TrainConfig, TrainLog};
use crate::augment::{make_view_pair, AugmentationConfig};
use crate::error::{Error, Result};
use crate::model::{apply_bn_updates, Ctx, Model, BACKBONE_PREFIX, CLASSIFIER_PREFIXES, PROJECTOR_PREFIX};
use crate::signal::{Subject, EPOCH_SAMPLES};
use crate::tensor::{AdamState, Graph, Tensor};

/// Sampling stream of the pretraining batches.
const SAMPLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug)]
pub struct CrlOutcome {
    /// Backbone and projection-head tensors (with running statistics) at
    /// the lowest validation loss.
    pub checkpoint: BTreeMap<String, Tensor>,
    pub best_val_loss: f64,
    pub best_iteration: usize,
    /// Validation losses in the order they were recorded.
    pub val_history: Vec<f64>,
    pub iterations: usize,
    pub early_stopped: bool,
}

fn epoch_refs(subjects: &[Subject]) -> Vec<(usize, usize)> {
    subjects
        .iter()
        .enumerate()
        .flat_map(|(s, sub)| (0..sub.n_epochs()).map(move |e| (s, e)))
        .collect()
}

fn is_pretrained(name: &str) -> bool {
    name.starts_with(BACKBONE_PREFIX) || name.starts_with(PROJECTOR_PREFIX)
}

/// Two augmented views per referenced epoch, pairs adjacent, as
/// `[2N, 1, 3000]` with matching stage indices.
fn view_batch(
    subjects: &[Subject],
    refs: &[(usize, usize)],
    aug: &AugmentationConfig,
    seed: u64,
    key_base: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(2 * refs.len() * EPOCH_SAMPLES);
    let mut labels = Vec::with_capacity(2 * refs.len());
    for (i, &(s, e)) in refs.iter().enumerate() {
        let sub = &subjects[s];
        let pair = make_view_pair(sub.epoch(e), sub.stages[e], aug, seed, key_base + i as u64)?;
        data.extend_from_slice(&pair.view_a);
        data.extend_from_slice(&pair.view_b);
        labels.extend([pair.label.index(); 2]);
    }
    Ok((Tensor::new(vec![2 * refs.len(), 1, EPOCH_SAMPLES], data)?, labels))
}

/// Mean per-anchor contrastive loss over the validation epochs, with views
/// drawn from `cfg.val_seed` and normalization from running statistics.
pub fn crl_validation_loss(model: &Model, val: &[Subject], aug: &AugmentationConfig, cfg: &TrainConfig) -> Result<f64> {
    let refs = evenly_spaced(&epoch_refs(val), cfg.max_val_items);
    if refs.is_empty() {
        return Err(Error::EmptyData("contrastive validation set has no epochs".into()));
    }
    let (mut total, mut anchors) = (0.0, 0usize);
    for (c, chunk) in refs.chunks(cfg.batch_crl).enumerate() {
        let (x, labels) = view_batch(val, chunk, aug, cfg.val_seed, (c * cfg.batch_crl) as u64)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = Ctx::eval(&model.store);
        let z = model.embed_views(&mut g, &mut ctx, xv)?;
        let (loss, _) = g.supcon_loss(z, &labels, model.cfg.tau)?;
        total += g.value(loss).item();
        anchors += labels.len();
    }
    Ok(total / anchors as f64)
}

/// Contrastive pretraining of the backbone and projection head. The model
/// is left holding the lowest-validation-loss weights.
pub fn run_crl(
    model: &mut Model,
    train: &[Subject],
    val: &[Subject],
    aug: &AugmentationConfig,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<CrlOutcome> {
    cfg.validate()?;
    aug.validate()?;
    let refs = epoch_refs(train);
    if refs.is_empty() {
        return Err(Error::EmptyData("contrastive training set has no epochs".into()));
    }
    if val.iter().all(|s| s.n_epochs() == 0) {
        return Err(Error::EmptyData("contrastive validation set has no epochs".into()));
    }
    for p in CLASSIFIER_PREFIXES {
        model.store.set_frozen(p, true);
    }
    model.store.set_frozen(BACKBONE_PREFIX, false);
    model.store.set_frozen(PROJECTOR_PREFIX, false);
    let result = crl_loop(model, train, val, aug, cfg, seed, log, refs);
    for p in CLASSIFIER_PREFIXES {
        model.store.set_frozen(p, false);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn crl_loop(
    model: &mut Model,
    train: &[Subject],
    val: &[Subject],
    aug: &AugmentationConfig,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut TrainLog,
    refs: Vec<(usize, usize)>,
) -> Result<CrlOutcome> {
    let mut sampler = Sampler::new(refs, seed, SAMPLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut adam = AdamState::new(cfg.adam(cfg.eta));
    let mut stop = EarlyStopState::new(cfg.phi);
    let mut best: Option<(BTreeMap<String, Tensor>, usize)> = None;
    let mut val_history = Vec::new();
    let mut early_stopped = false;
    let mut key_base = 0u64;
    let mut it = 0;
    while it < cfg.max_iters_crl {
        it += 1;
        let batch = sampler.next_batch(cfg.batch_crl);
        let (x, labels) = view_batch(train, &batch, aug, seed, key_base)?;
        key_base += batch.len() as u64;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (loss, updates) = {
            let mut ctx = Ctx::train(&model.store, &mut dropout_rng);
            let z = model.embed_views(&mut g, &mut ctx, xv)?;
            let (sum, _) = g.supcon_loss(z, &labels, model.cfg.tau)?;
            let loss = g.scale(sum, 1.0 / labels.len() as f64);
            g.backward(loss)?;
            (g.value(loss).item(), std::mem::take(&mut ctx.bn_updates))
        };
        model.store.zero_grad();
        g.accumulate_param_grads(&mut model.store);
        drop(g);
        adam.step(&mut model.store)?;
        apply_bn_updates(&mut model.store, &updates, model.cfg.bn_momentum);
        log.push(it, "train", loss, None);

        let last = it == cfg.max_iters_crl;
        if it % cfg.psi1 == 0 || (last && val_history.is_empty()) {
            let v = crl_validation_loss(model, val, aug, cfg)?;
            val_history.push(v);
            log.push(it, "val", v, None);
            match stop.update(v)? {
                StopSignal::Improved => best = Some((model.store.snapshot_where(is_pretrained), it)),
                StopSignal::Continue => {}
                StopSignal::Stop => {
                    early_stopped = true;
                    break;
                }
            }
        }
    }
    let (checkpoint, best_iteration) = best.ok_or_else(|| Error::EmptyData("no validation step completed".into()))?;
    model.store.restore_where(is_pretrained, &checkpoint)?;
    Ok(CrlOutcome {
        checkpoint,
        best_val_loss: stop.best_val_loss,
        best_iteration,
        val_history,
        iterations: it,
        early_stopped,
    })
}
