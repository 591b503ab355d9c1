use std::collections::BTreeMap;

use super::{init_param, Ctx, Init, ModelConfig, BnMode};
use crate::error::{Error, Result};
use crate::signal::EPOCH_SAMPLES;
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Backbone outputs by 1-based stage: C3, C4 and C5 as `[B, c_i, T_i]`.
pub type Taps = BTreeMap<usize, Var>;

/// Stages whose outputs are exposed as taps.
pub const TAP_STAGES: [usize; 3] = [3, 4, 5];

#[derive(Clone, Debug)]
pub struct SeBlock {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// Prefix of the batch-norm parameters and running statistics.
    pub bn_name: String,
    pub bn_w: ParamId,
    pub bn_b: ParamId,
    pub prelu: ParamId,
    pub se: Option<SeBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<[ConvUnit; 2]>,
    padding: usize,
    pool: usize,
    eps: f64,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Backbone {
        let mut blocks = Vec::with_capacity(5);
        let mut cin = 1;
        for (bi, &c) in cfg.block_channels.iter().enumerate() {
            let prefix = format!("backbone.block{}", bi + 1);
            let unit = |store: &mut ParamStore, u: usize, cin: usize, with_se: bool| {
                let conv = format!("{prefix}.conv{u}");
                let bn = format!("{prefix}.bn{u}");
                let kaiming = Init::Kaiming {
                    fan_in: cin * cfg.kernel,
                    slope: cfg.prelu_init,
                };
                let se = with_se.then(|| {
                    let hidden = (c / cfg.se_reduction).max(1);
                    let lin = |fan_in| Init::Kaiming { fan_in, slope: 0.0 };
                    SeBlock {
                        fc1_w: init_param(store, seed, &format!("{prefix}.se.fc1.weight"), &[c, hidden], lin(c)),
                        fc1_b: init_param(store, seed, &format!("{prefix}.se.fc1.bias"), &[hidden], Init::Const(0.0)),
                        fc2_w: init_param(store, seed, &format!("{prefix}.se.fc2.weight"), &[hidden, c], lin(hidden)),
                        fc2_b: init_param(store, seed, &format!("{prefix}.se.fc2.bias"), &[c], Init::Const(0.0)),
                    }
                });
                ConvUnit {
                    conv_w: init_param(store, seed, &format!("{conv}.weight"), &[c, cin, cfg.kernel], kaiming),
                    conv_b: init_param(store, seed, &format!("{conv}.bias"), &[c], Init::Const(0.0)),
                    bn_w: init_param(store, seed, &format!("{bn}.weight"), &[c], Init::Const(1.0)),
                    bn_b: init_param(store, seed, &format!("{bn}.bias"), &[c], Init::Const(0.0)),
                    bn_name: bn,
                    prelu: init_param(store, seed, &format!("{prefix}.prelu{u}.weight"), &[c], Init::Const(cfg.prelu_init)),
                    se,
                }
            };
            let first = unit(store, 1, cin, false);
            let second = unit(store, 2, c, true);
            blocks.push([first, second]);
            cin = c;
        }
        Backbone {
            blocks,
            padding: cfg.padding,
            pool: cfg.pool,
            eps: cfg.bn_eps,
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// `x` is `[B, 1, 3000·L]`.
    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Taps> {
        let stages = self.forward_stages(g, ctx, x)?;
        Ok(TAP_STAGES.iter().map(|&s| (s, stages[s - 1])).collect())
    }

    /// Output of every block, in order; blocks after the first start with
    /// a max-pool, so block i's length is the pooled length of block i − 1.
    pub fn forward_stages(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] == 0 || s[2] % EPOCH_SAMPLES != 0 {
            return Err(Error::shape(
                "backbone",
                format!("expected [B, 1, 3000·L] input, got {s:?}"),
            ));
        }
        let mut stages = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (bi, block) in self.blocks.iter().enumerate() {
            if bi > 0 {
                h = g.maxpool1d_ceil(h, self.pool)?;
            }
            for unit in block {
                h = self.unit_forward(g, ctx, h, unit)?;
            }
            stages.push(h);
        }
        Ok(stages)
    }

    fn unit_forward(&self, g: &mut Graph, ctx: &mut Ctx, x: Var, u: &ConvUnit) -> Result<Var> {
        let w = ctx.param(g, u.conv_w);
        let b = ctx.param(g, u.conv_b);
        let mut h = g.conv1d(x, w, b, 1, self.padding)?;
        h = batch_norm(g, ctx, h, &u.bn_name, u.bn_w, u.bn_b, self.eps)?;
        if let Some(se) = &u.se {
            h = se_forward(g, ctx, h, se)?;
        }
        let alpha = ctx.param(g, u.prelu);
        g.prelu(h, alpha, 1)
    }
}

/// Batch norm in the mode selected by `ctx`.
pub fn batch_norm(g: &mut Graph, ctx: &mut Ctx, x: Var, name: &str, gamma: ParamId, beta: ParamId, eps: f64) -> Result<Var> {
    let gv = ctx.param(g, gamma);
    let bv = ctx.param(g, beta);
    match ctx.bn {
        BnMode::Batch { update } => {
            let (y, stats) = g.batchnorm1d_train(x, gv, bv, eps)?;
            if update {
                ctx.bn_updates.push((name.to_string(), stats));
            }
            Ok(y)
        }
        BnMode::Running => {
            let missing = || Error::invalid("batchnorm1d", format!("running statistics of `{name}` are uninitialized"));
            let mean = ctx.store.buffer(&format!("{name}.running_mean")).ok_or_else(missing)?;
            let var = ctx.store.buffer(&format!("{name}.running_var")).ok_or_else(missing)?;
            g.batchnorm1d_eval(x, gv, bv, mean.data(), var.data(), eps)
        }
    }
}

/// Squeeze-and-excitation: global temporal mean, bottleneck MLP, sigmoid
/// gate per channel.
pub fn se_forward(g: &mut Graph, ctx: &mut Ctx, u: Var, se: &SeBlock) -> Result<Var> {
    let squeeze = g.mean_axis(u, 2)?;
    let (w1, b1) = (ctx.param(g, se.fc1_w), ctx.param(g, se.fc1_b));
    let (w2, b2) = (ctx.param(g, se.fc2_w), ctx.param(g, se.fc2_b));
    let h = g.linear(squeeze, w1, Some(b1))?;
    let h = g.relu(h);
    let e = g.linear(h, w2, Some(b2))?;
    let gate = g.sigmoid(e);
    g.scale_channels(u, gate)
}
