use std::collections::BTreeMap;

use super::backbone::Taps;
use super::{init_param, Ctx, Init, ModelConfig, PeExponent, PoolActivation};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `slope` selects the gain: 0 ahead of a ReLU, 1 for a linear use.
    fn new(store: &mut ParamStore, seed: u64, name: &str, din: usize, dout: usize, bias: bool, slope: f64) -> Linear {
        let w = init_param(store, seed, &format!("{name}.weight"), &[din, dout], Init::Kaiming { fan_in: din, slope });
        let b = bias.then(|| init_param(store, seed, &format!("{name}.bias"), &[dout], Init::Const(0.0)));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(g, self.w);
        let b = self.b.map(|b| ctx.param(g, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, seed: u64, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: init_param(store, seed, &format!("{name}.weight"), &[d], Init::Const(1.0)),
            beta: init_param(store, seed, &format!("{name}.bias"), &[d], Init::Const(0.0)),
        }
    }

    fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(g, self.gamma);
        let beta = ctx.param(g, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Post-norm encoder layer with a ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub stage: usize,
    /// `[B, N_c]`
    pub logits: Var,
    /// Attention-pool weights `[B, T_i]`.
    pub alpha: Var,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    taps: Vec<usize>,
    /// Width-1 convolutions `c_i → d_f`, keyed by stage.
    pub lateral: BTreeMap<usize, (ParamId, ParamId)>,
    pub shared_fc: Linear,
    pub shared_prelu: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub pool_proj: Linear,
    pub pool_score: Linear,
    pub head: Linear,
    n_heads: usize,
    d_m: usize,
    pool: usize,
    dropout: f64,
    pe_exponent: PeExponent,
    pool_activation: PoolActivation,
}

impl Classifier {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Classifier {
        let mut lateral = BTreeMap::new();
        let mut stages = cfg.taps.clone();
        if cfg.representation == super::Representation::F5 && !stages.contains(&5) {
            stages.push(5);
        }
        for &i in &stages {
            let c = cfg.stage_channels(i);
            let w = init_param(store, seed, &format!("lateral.{i}.weight"), &[cfg.d_f, c, 1], Init::Kaiming { fan_in: c, slope: 1.0 });
            let b = init_param(store, seed, &format!("lateral.{i}.bias"), &[cfg.d_f], Init::Const(0.0));
            lateral.insert(i, (w, b));
        }
        let shared_fc = Linear::new(store, seed, "shared_fc", cfg.d_f, cfg.d_m, true, cfg.prelu_init);
        let shared_prelu = init_param(store, seed, "shared_fc.prelu.weight", &[cfg.d_m], Init::Const(cfg.prelu_init));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                let lin = |store: &mut ParamStore, n: &str, din, dout, slope| Linear::new(store, seed, &format!("{p}.{n}"), din, dout, true, slope);
                EncoderLayer {
                    q: lin(store, "attn.q", cfg.d_m, cfg.d_m, 1.0),
                    k: lin(store, "attn.k", cfg.d_m, cfg.d_m, 1.0),
                    v: lin(store, "attn.v", cfg.d_m, cfg.d_m, 1.0),
                    out: lin(store, "attn.out", cfg.d_m, cfg.d_m, 1.0),
                    norm1: LayerNorm::new(store, seed, &format!("{p}.norm1"), cfg.d_m),
                    fc1: lin(store, "ffn.fc1", cfg.d_m, cfg.d_ff, 0.0),
                    fc2: lin(store, "ffn.fc2", cfg.d_ff, cfg.d_m, 1.0),
                    norm2: LayerNorm::new(store, seed, &format!("{p}.norm2"), cfg.d_m),
                }
            })
            .collect();
        Classifier {
            taps: cfg.taps.clone(),
            lateral,
            shared_fc,
            shared_prelu,
            layers,
            pool_proj: Linear::new(store, seed, "attnpool.proj", cfg.d_m, cfg.d_m, true, 1.0),
            pool_score: Linear::new(store, seed, "attnpool.score", cfg.d_m, 1, false, 1.0),
            head: Linear::new(store, seed, "head", cfg.d_m, cfg.n_classes, true, 1.0),
            n_heads: cfg.n_heads,
            d_m: cfg.d_m,
            pool: cfg.pool,
            dropout: cfg.dropout,
            pe_exponent: cfg.pe_exponent,
            pool_activation: cfg.pool_activation,
        }
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// `C_i [B, c_i, T] → F_i [B, d_f, T]`.
    pub fn lateral_connect(&self, g: &mut Graph, ctx: &Ctx, stage: usize, c: Var) -> Result<Var> {
        let &(w, b) = self
            .lateral
            .get(&stage)
            .ok_or_else(|| Error::invalid("lateral_connect", format!("no lateral connection for stage {stage}")))?;
        let w = ctx.param(g, w);
        let b = ctx.param(g, b);
        g.conv1d(c, w, b, 1, 0)
    }

    /// `F_i [B, d_f, T] → Z_i [B, T, d_m]`: shared FC, PReLU, then the
    /// level's positional encoding (omitted when `with_pe` is false).
    pub fn embed(&self, g: &mut Graph, ctx: &Ctx, stage: usize, f: Var, with_pe: bool) -> Result<Var> {
        let ft = g.swap_last2(f)?;
        let h = self.shared_fc.forward(g, ctx, ft)?;
        let alpha = ctx.param(g, self.shared_prelu);
        let z = g.prelu(h, alpha, 2)?;
        if !with_pe {
            return Ok(z);
        }
        let s = g.shape(z).to_vec();
        let pe = positional_encoding(stage, s[1], self.d_m, self.pool, self.pe_exponent)?;
        let tiled: Vec<f64> = (0..s[0]).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = g.constant(Tensor::new(s, tiled)?);
        g.add(z, pe)
    }

    /// Runs every encoder layer; shape is preserved.
    pub fn encode(&self, g: &mut Graph, ctx: &mut Ctx, mut z: Var) -> Result<Var> {
        for layer in &self.layers {
            let q = layer.q.forward(g, ctx, z)?;
            let k = layer.k.forward(g, ctx, z)?;
            let v = layer.v.forward(g, ctx, z)?;
            let a = g.attention(q, k, v, self.n_heads)?;
            let o = layer.out.forward(g, ctx, a)?;
            let o = ctx.dropout(g, o, self.dropout)?;
            let r = g.add(z, o)?;
            let h = layer.norm1.forward(g, ctx, r)?;
            let f = layer.fc1.forward(g, ctx, h)?;
            let f = g.relu(f);
            let f = layer.fc2.forward(g, ctx, f)?;
            let f = ctx.dropout(g, f, self.dropout)?;
            let r = g.add(h, f)?;
            z = layer.norm2.forward(g, ctx, r)?;
        }
        Ok(z)
    }

    /// `H [B, T, d_m]` → pooled `[B, d_m]` and weights `[B, T]`.
    pub fn attention_pool(&self, g: &mut Graph, ctx: &Ctx, h: Var) -> Result<(Var, Var)> {
        let p = self.pool_proj.forward(g, ctx, h)?;
        let a = match self.pool_activation {
            PoolActivation::Tanh => g.tanh(p),
            PoolActivation::Relu => g.relu(p),
        };
        let s = self.pool_score.forward(g, ctx, a)?;
        let sh = g.shape(s).to_vec();
        let s = g.reshape(s, &sh[..2])?;
        let alpha = g.softmax(s, 1)?;
        Ok((g.weighted_time_sum(alpha, a)?, alpha))
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, taps: &Taps) -> Result<Vec<LevelOutput>> {
        self.taps
            .iter()
            .map(|&stage| {
                let c = *taps
                    .get(&stage)
                    .ok_or_else(|| Error::invalid("classifier", format!("backbone tap {stage} missing")))?;
                let f = self.lateral_connect(g, ctx, stage, c)?;
                let z = self.embed(g, ctx, stage, f, true)?;
                let h = self.encode(g, ctx, z)?;
                let (pooled, alpha) = self.attention_pool(g, ctx, h)?;
                let logits = self.head.forward(g, ctx, pooled)?;
                Ok(LevelOutput { stage, logits, alpha })
            })
            .collect()
    }
}

/// Effective position of index `t` at stage `i`: `t·R^{i−3} + ⌊R^{i−3}/2⌋`,
/// the centre of the span it summarizes in stage-3 units.
pub fn pe_position(stage: usize, t: usize, pool: usize) -> usize {
    let hop = pool.pow(stage as u32 - 3);
    t * hop + hop / 2
}

/// Hopped sinusoidal encoding `[T, d_m]` for pyramid level `stage`.
pub fn positional_encoding(stage: usize, t_len: usize, d_m: usize, pool: usize, exponent: PeExponent) -> Result<Tensor> {
    if !(3..=5).contains(&stage) {
        return Err(Error::invalid("positional_encoding", format!("stage {stage} is not a pyramid level")));
    }
    let mut data = Vec::with_capacity(t_len * d_m);
    for t in 0..t_len {
        let pos = pe_position(stage, t, pool) as f64;
        for k in 0..d_m {
            let e = match exponent {
                PeExponent::Printed => k,
                PeExponent::Paired => 2 * (k / 2),
            };
            let arg = pos / 10000f64.powf(e as f64 / d_m as f64);
            data.push(if k % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    Tensor::new(vec![t_len, d_m], data)
}

/// Index of the largest summed logit; ties go to the lowest index.
pub fn predict_stage(levels: &[&[f64]]) -> Result<usize> {
    let n = levels.first().map(|l| l.len()).unwrap_or(0);
    if n == 0 || levels.iter().any(|l| l.len() != n) {
        return Err(Error::shape("predict_stage", "logit vectors must be non-empty and equally long"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..n {
        let mut s = 0.0;
        for l in levels {
            if l[c].is_nan() {
                return Err(Error::NonFinite(format!("predict_stage: NaN logit at class {c}")));
            }
            s += l[c];
        }
        if s > best.1 || c == 0 {
            best = (c, s);
        }
    }
    Ok(best.0)
}
