//! The network: a five-block convolutional backbone, a feature-pyramid
//! transformer classifier over three backbone taps, and the projection head
//! used during contrastive pretraining.

pub mod backbone;
pub mod classifier;
pub mod contrastive;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backbone::{Backbone, Taps};
pub use classifier::{positional_encoding, predict_stage, Classifier, LevelOutput};
pub use contrastive::Projector;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeExponent {
    /// `k / d_m` for every feature index k.
    #[default]
    Printed,
    /// `2⌊k/2⌋ / d_m`, pairing each sine with the cosine of equal frequency.
    Paired,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolActivation {
    #[default]
    Tanh,
    Relu,
}

/// Which features feed the contrastive representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Temporal mean of the last backbone tap (`c_5` channels).
    #[default]
    C5,
    /// Temporal mean of the stage-5 lateral projection (`d_f` channels).
    F5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    pub se_reduction: usize,
    /// Backbone stages feeding the pyramid, a subset of {3, 4, 5}.
    pub taps: Vec<usize>,
    pub d_f: usize,
    pub d_m: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub seq_len: usize,
    pub d_z: usize,
    pub projector_hidden: usize,
    pub tau: f64,
    pub dropout: f64,
    pub pe_exponent: PeExponent,
    pub pool_activation: PoolActivation,
    pub representation: Representation,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub prelu_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_channels: vec![64, 128, 192, 256, 256],
            kernel: 3,
            padding: 1,
            pool: 5,
            se_reduction: 16,
            taps: vec![3, 4, 5],
            d_f: 128,
            d_m: 128,
            d_ff: 128,
            n_heads: 8,
            n_layers: 6,
            n_classes: 5,
            seq_len: 10,
            d_z: 128,
            projector_hidden: 128,
            tau: 0.07,
            dropout: 0.1,
            pe_exponent: PeExponent::Printed,
            pool_activation: PoolActivation::Tanh,
            representation: Representation::C5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            prelu_init: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                detail,
            })
        };
        if self.block_channels.len() != 5 || self.block_channels.contains(&0) {
            return bad("block_channels", format!("need five positive widths, got {:?}", self.block_channels));
        }
        if self.taps.is_empty() || self.taps.iter().any(|t| !(3..=5).contains(t)) {
            return bad("taps", format!("must be a non-empty subset of [3, 4, 5], got {:?}", self.taps));
        }
        let mut sorted = self.taps.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.taps {
            return bad("taps", "must be strictly increasing".into());
        }
        if self.n_heads == 0 || self.d_m % self.n_heads != 0 {
            return bad("n_heads", format!("d_m = {} is not divisible by {} heads", self.d_m, self.n_heads));
        }
        for (k, v) in [
            ("kernel", self.kernel),
            ("pool", self.pool),
            ("se_reduction", self.se_reduction),
            ("d_f", self.d_f),
            ("d_m", self.d_m),
            ("d_ff", self.d_ff),
            ("n_classes", self.n_classes),
            ("seq_len", self.seq_len),
            ("d_z", self.d_z),
            ("projector_hidden", self.projector_hidden),
        ] {
            if v == 0 {
                return bad(k, "must be at least 1".into());
            }
        }
        if self.kernel > 2 * self.padding + 1 {
            return bad("kernel", "kernel wider than 2·padding + 1 would shrink the temporal axis".into());
        }
        if !(self.tau > 0.0) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum", "momentum must lie in [0, 1] and eps be positive".into());
        }
        Ok(())
    }

    /// Temporal reduction of backbone stage `stage` (1-based): the pool
    /// width raised to the number of pools before it.
    pub fn reduction(&self, stage: usize) -> usize {
        self.pool.pow(stage as u32 - 1)
    }

    /// Output channels of backbone stage `stage` (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.block_channels[stage - 1]
    }
}

/// How batch norm behaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; optionally fold them into the
    /// running statistics afterwards.
    Batch { update: bool },
    /// Normalize with the stored running statistics.
    Running,
}

/// Per-forward state: parameter bindings, normalization mode, dropout and
/// the batch statistics collected for a later running-stat update.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub bn: BnMode,
    pub dropout: Option<&'a mut ChaCha8Rng>,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            store,
            bn: BnMode::Batch { update: true },
            dropout: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Ctx {
            store,
            bn: BnMode::Running,
            dropout: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(self.store, id)
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        match self.dropout.as_deref_mut() {
            Some(rng) if p > 0.0 => g.dropout(x, p, rng),
            _ => Ok(x),
        }
    }
}

/// Folds collected batch statistics into the running statistics:
/// `running ← (1 − m)·running + m·batch`, starting from mean 0 and
/// variance 1 for a layer seen for the first time.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[(String, BatchStats)], momentum: f64) {
    for (name, stats) in updates {
        for (suffix, batch, init) in [("running_mean", &stats.mean, 0.0), ("running_var", &stats.var, 1.0)] {
            let key = format!("{name}.{suffix}");
            let mut cur = store
                .buffer(&key)
                .cloned()
                .unwrap_or_else(|| Tensor::full(&[batch.len()], init));
            for (r, b) in cur.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            store.set_buffer(key, cur);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Normal with variance `2 / ((1 + a²)·fan_in)` for a leaky slope `a`.
    Kaiming { fan_in: usize, slope: f64 },
    Const(f64),
}

/// Registers a parameter whose initial values depend only on `seed` and
/// its name, so adding or removing other modules never perturbs it.
pub(crate) fn init_param(store: &mut ParamStore, seed: u64, name: &str, shape: &[usize], init: Init) -> ParamId {
    let t = match init {
        Init::Const(v) => Tensor::full(shape, v),
        Init::Kaiming { fan_in, slope } => {
            let digest = Sha256::digest(name.as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
            let std = (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        }
    };
    store.add(name, t)
}

/// Parameter name prefixes that make up the classifier side of the model.
pub const CLASSIFIER_PREFIXES: [&str; 5] = ["lateral.", "shared_fc.", "encoder.", "attnpool.", "head."];
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const PROJECTOR_PREFIX: &str = "projector.";

/// Everything but the projection head.
pub fn is_sequence_model_param(name: &str) -> bool {
    !name.starts_with(PROJECTOR_PREFIX)
}

/// Backbone, classifier and projection head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub classifier: Classifier,
    pub projector: Projector,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg, &mut store, seed);
        let classifier = Classifier::new(&cfg, &mut store, seed);
        let projector = Projector::new(&cfg, &mut store, seed);
        Ok(Model {
            cfg,
            store,
            backbone,
            classifier,
            projector,
        })
    }

    /// Parameter and buffer snapshot of the sequence model, without the
    /// projection head.
    pub fn sequence_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.store.snapshot_where(is_sequence_model_param)
    }

    /// Runs the frozen backbone in its own tape-free graph and returns its
    /// tap values, so a caller's graph never holds backbone activations.
    pub fn backbone_taps_detached(&self, x: &Tensor, bn: BnMode) -> Result<BTreeMap<usize, Tensor>> {
        let mut g = Graph::new();
        let mut ctx = Ctx {
            store: &self.store,
            bn,
            dropout: None,
            bn_updates: Vec::new(),
        };
        let xv = g.constant(x.clone());
        let taps = self.backbone.forward(&mut g, &mut ctx, xv)?;
        Ok(taps.iter().map(|(&stage, &v)| (stage, g.value(v).clone())).collect())
    }

    /// Per-level logits for a batch `[B, 1, 3000·L]` of raw sequences.
    pub fn forward_logits(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Vec<LevelOutput>> {
        let taps = self.backbone.forward(g, ctx, x)?;
        self.classifier.forward(g, ctx, &taps)
    }

    /// Predicted stages for a batch of sequences in evaluation mode.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let taps = self.backbone_taps_detached(x, BnMode::Running)?;
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&self.store);
        let taps: BTreeMap<usize, Var> = taps.into_iter().map(|(s, t)| (s, g.constant(t))).collect();
        let levels = self.classifier.forward(&mut g, &mut ctx, &taps)?;
        let logits: Vec<&Tensor> = levels.iter().map(|l| g.value(l.logits)).collect();
        let b = x.shape()[0];
        let c = self.cfg.n_classes;
        (0..b)
            .map(|i| {
                let rows: Vec<&[f64]> = logits.iter().map(|t| &t.data()[i * c..(i + 1) * c]).collect();
                predict_stage(&rows)
            })
            .collect()
    }
}
