//! Two-stage training: contrastive pretraining of the backbone, then
//! sequence training of the classifier on top of the frozen backbone.

mod crl;
mod mtcl;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crl::{crl_validation_loss, run_crl, CrlOutcome};
pub use mtcl::{calibrate_batchnorm, evaluate_sequences, run_mtcl, sequence_input, MtclOutcome, SequenceEval};

use crate::error::{Error, Result};
use crate::signal::PadHead;
use crate::tensor::{AdamConfig, Graph, Var};

/// Normalization of the frozen backbone during sequence training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrozenBn {
    /// Running statistics stored at the end of pretraining.
    #[default]
    Running,
    /// Statistics of the current sequence, never stored.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Source epochs per contrastive batch; each contributes two views.
    pub batch_crl: usize,
    pub batch_mtcl: usize,
    /// Validation period of pretraining, in iterations.
    pub psi1: usize,
    /// Validation period of sequence training, in iterations.
    pub psi2: usize,
    /// Early-stopping patience in validation steps.
    pub phi: usize,
    /// Hard iteration caps, so a run ends even without early stopping.
    pub max_iters_crl: usize,
    pub max_iters_mtcl: usize,
    /// Validation uses at most this many items, evenly spaced (0 = all).
    pub max_val_items: usize,
    /// Seed of the validation views, fixed so validation is repeatable.
    pub val_seed: u64,
    pub frozen_bn: FrozenBn,
    pub pad_head: PadHead,
    /// Learning-rate override for sequence training (defaults to `eta`).
    pub eta_mtcl: Option<f64>,
    /// Print every log row to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            batch_crl: 1024,
            batch_mtcl: 64,
            psi1: 50,
            psi2: 500,
            phi: 20,
            max_iters_crl: 100_000,
            max_iters_mtcl: 100_000,
            max_val_items: 0,
            val_seed: 0x5eed,
            frozen_bn: FrozenBn::Running,
            pad_head: PadHead::Repeat,
            eta_mtcl: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("train.{key}"),
                detail,
            })
        };
        for (k, v) in [
            ("batch_crl", self.batch_crl),
            ("batch_mtcl", self.batch_mtcl),
            ("psi1", self.psi1),
            ("psi2", self.psi2),
        ] {
            if v == 0 {
                return bad(k, "must be at least 1".into());
            }
        }
        for (k, v) in [("eta", Some(self.eta)), ("eta_mtcl", self.eta_mtcl)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(k, format!("learning rate must be positive, got {v}"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps", "eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Best-so-far early stopping: strictly lower loss improves, anything
/// else counts against the patience.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub counter: usize,
    pub phi: usize,
}

impl EarlyStopState {
    pub fn new(phi: usize) -> Self {
        EarlyStopState {
            best_val_loss: f64::INFINITY,
            counter: 0,
            phi,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> Result<StopSignal> {
        if val_loss.is_nan() {
            return Err(Error::NonFinite("validation loss is NaN".into()));
        }
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.counter = 0;
            return Ok(StopSignal::Improved);
        }
        self.counter += 1;
        Ok(if self.counter > self.phi { StopSignal::Stop } else { StopSignal::Continue })
    }
}

/// Sum over pyramid levels of the batch-mean cross-entropy.
pub fn mtcl_loss(g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &o in logits {
        let ce = g.cross_entropy(o, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::invalid("mtcl_loss", "no pyramid levels"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub echo: bool,
}

impl TrainLog {
    pub fn push(&mut self, iteration: usize, split: &str, loss: f64, accuracy: Option<f64>) {
        if self.echo {
            match accuracy {
                Some(a) => eprintln!("[{split}] iter {iteration}: loss {loss:.5} acc {a:.4}"),
                None => eprintln!("[{split}] iter {iteration}: loss {loss:.5}"),
            }
        }
        self.rows.push(LogRow {
            iteration,
            split: split.to_string(),
            loss,
            accuracy,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,split,loss,accuracy\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| format!("{a}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.iteration, r.split, r.loss, acc));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Uniform sampling without replacement, reshuffled after every pass.
pub(crate) struct Sampler<T> {
    items: Vec<T>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<T: Clone> Sampler<T> {
    pub(crate) fn new(items: Vec<T>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut s = Sampler { items, pos: 0, rng };
        s.items.shuffle(&mut s.rng);
        s
    }

    /// The next `n` items (at most the pool size).
    pub(crate) fn next_batch(&mut self, n: usize) -> Vec<T> {
        let n = n.min(self.items.len());
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.items.len() {
                self.items.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.items[self.pos].clone());
            self.pos += 1;
        }
        out
    }
}

/// At most `cap` evenly spaced picks from `items` (all when `cap` is 0).
pub(crate) fn evenly_spaced<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if cap == 0 || items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn early_stop_examples() {
        let mut s = EarlyStopState::new(20);
        for l in [1.0, 0.9, 0.8] {
            assert_eq!(s.update(l).unwrap(), StopSignal::Improved);
            assert_eq!(s.counter, 0);
        }
        let mut s = EarlyStopState::new(3);
        assert_eq!(s.update(1.0).unwrap(), StopSignal::Improved);
        let mut stopped_at = None;
        for v in 2..=10 {
            if s.update(1.1).unwrap() == StopSignal::Stop {
                stopped_at = Some(v);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3 + 2));
        let mut s = EarlyStopState::new(5);
        s.update(1.0).unwrap();
        assert_eq!(s.update(1.0).unwrap(), StopSignal::Continue);
        assert_eq!(s.counter, 1);
        assert!(s.update(f64::NAN).is_err());
    }

    #[test]
    fn zero_logits_give_three_ln5() {
        let mut g = Graph::new();
        let o: Vec<Var> = (0..3).map(|_| g.constant(Tensor::zeros(&[4, 5]))).collect();
        let l = mtcl_loss(&mut g, &o, &[0, 1, 2, 4]).unwrap();
        assert!((g.value(l).item() - 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let mut g = Graph::new();
        let mut t = vec![-50.0; 5];
        t[3] = 50.0;
        let o: Vec<Var> = (0..3).map(|_| g.constant(Tensor::new(vec![1, 5], t.clone()).unwrap())).collect();
        let l = mtcl_loss(&mut g, &o, &[3]).unwrap();
        assert!(g.value(l).item() < 1e-40);
    }

    #[test]
    fn sampler_covers_each_pass() {
        let mut s = Sampler::new((0..10).collect::<Vec<_>>(), 1, 0);
        let mut a = s.next_batch(4);
        a.extend(s.next_batch(6));
        a.sort();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch(50).len(), 10);
    }

    #[test]
    fn evenly_spaced_caps() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(evenly_spaced(&v, 0), v);
        assert_eq!(evenly_spaced(&v, 5), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn config_rejects_zero_period() {
        let c = TrainConfig {
            psi2: 0,
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("train.psi2"), "{err}");
    }
}
