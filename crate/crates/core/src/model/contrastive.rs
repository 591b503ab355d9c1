use super::{init_param, Ctx, Init, Model, ModelConfig, Representation};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Two-layer projection head with a ReLU hidden layer; used only during
/// contrastive pretraining.
#[derive(Clone, Debug)]
pub struct Projector {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl Projector {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Projector {
        let din = representation_dim(cfg);
        let h = cfg.projector_hidden;
        Projector {
            fc1_w: init_param(store, seed, "projector.fc1.weight", &[din, h], Init::Kaiming { fan_in: din, slope: 0.0 }),
            fc1_b: init_param(store, seed, "projector.fc1.bias", &[h], Init::Const(0.0)),
            fc2_w: init_param(store, seed, "projector.fc2.weight", &[h, cfg.d_z], Init::Kaiming { fan_in: h, slope: 1.0 }),
            fc2_b: init_param(store, seed, "projector.fc2.bias", &[cfg.d_z], Init::Const(0.0)),
        }
    }

    /// `r [N, d_r] → z [N, d_z]` with unit rows.
    pub fn project_normalize(&self, g: &mut Graph, ctx: &Ctx, r: Var) -> Result<Var> {
        let (w1, b1) = (ctx.param(g, self.fc1_w), ctx.param(g, self.fc1_b));
        let (w2, b2) = (ctx.param(g, self.fc2_w), ctx.param(g, self.fc2_b));
        let h = g.linear(r, w1, Some(b1))?;
        let h = g.relu(h);
        let z = g.linear(h, w2, Some(b2))?;
        g.l2_normalize(z)
    }
}

pub fn representation_dim(cfg: &ModelConfig) -> usize {
    match cfg.representation {
        Representation::C5 => cfg.stage_channels(5),
        Representation::F5 => cfg.d_f,
    }
}

impl Model {
    /// Temporal mean of the stage-5 output for single epochs `[N, 1, 3000]`.
    pub fn represent(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let taps = self.backbone.forward(g, ctx, x)?;
        let c5 = *taps.get(&5).ok_or_else(|| Error::invalid("represent", "backbone produced no stage-5 output"))?;
        let feats = match self.cfg.representation {
            Representation::C5 => c5,
            Representation::F5 => self.classifier.lateral_connect(g, ctx, 5, c5)?,
        };
        g.mean_axis(feats, 2)
    }

    /// Unit-norm contrastive embeddings for single epochs `[N, 1, 3000]`.
    pub fn embed_views(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let r = self.represent(g, ctx, x)?;
        self.projector.project_normalize(g, ctx, r)
    }
}
