//! Context encoder, EMA target encoder, and predictor.

pub mod checkpoint;
mod encoder;
pub mod layers;
pub mod params;
mod predictor;
mod scalar;

use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

pub use checkpoint::{Checkpoint, NamedArray};
pub use encoder::{Encoder, EncoderCache, EncoderLayout, KeyExclusion};
pub use params::{Param, ParamId, ParamStore};
pub use predictor::{Predictor, PredictorCache, PredictorLayout};
pub use scalar::Scalar;

use crate::error::{Error, Result};
use crate::maskgen::{GridShape, MaskIndexSet, MaskPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub n_heads: usize,
    pub pred_depth: usize,
    pub pred_dim: usize,
    pub mlp_ratio: f64,
    pub patch_len: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults. ViT-B analog: 768 wide, 12 deep, 12 heads, with a
    /// 16-layer 512-wide predictor.
    fn default() -> Self {
        Self {
            embed_dim: 64,
            enc_depth: 4,
            n_heads: 4,
            pred_depth: 4,
            pred_dim: 32,
            mlp_ratio: 4.0,
            patch_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.enc_depth == 0 || self.pred_depth == 0 || self.patch_len == 0 {
            return err("depths, heads and patch length must be positive".into());
        }
        if self.embed_dim % self.n_heads != 0 || self.pred_dim % self.n_heads != 0 {
            return err(format!(
                "widths {} / {} not divisible by {} heads",
                self.embed_dim, self.pred_dim, self.n_heads
            ));
        }
        if self.embed_dim % 4 != 0 || self.pred_dim % 4 != 0 || self.pred_dim == 0 {
            return err("widths must be positive multiples of 4 for 2-D positions".into());
        }
        if self.pred_dim > self.embed_dim {
            return err(format!(
                "pred_dim {} exceeds embed_dim {}",
                self.pred_dim, self.embed_dim
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return err("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        ((width as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// How target features are normalized before the regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetNorm {
    /// Per-token layer norm without affine parameters.
    LayerNorm,
    None,
}

impl FromStr for TargetNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(Self::LayerNorm),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown target_norm `{other}`"))),
        }
    }
}

impl std::fmt::Display for TargetNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LayerNorm => "layernorm",
            Self::None => "none",
        })
    }
}

/// `target <- m * target + (1 - m) * online`, array by array.
pub fn ema_update<F: Scalar>(target: &mut ParamStore<F>, online: &ParamStore<F>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    target.check_compatible(online)?;
    let (keep, take) = (F::of(m), F::of(1.0 - m));
    for (t, o) in target.iter_mut().zip(online.iter()) {
        t.data
            .iter_mut()
            .zip(&o.data)
            .for_each(|(a, &b)| *a = keep * *a + take * b);
    }
    Ok(())
}

/// The three pretraining networks.
#[derive(Debug, Clone)]
pub struct Jepa<F> {
    pub cfg: ModelConfig,
    pub context: Encoder<F>,
    /// EMA copy of `context`; never receives gradients.
    pub target: Encoder<F>,
    pub predictor: Predictor<F>,
}

impl<F: Scalar> Jepa<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, grid: GridShape, rng: &mut R) -> Result<Self> {
        let context = Encoder::new(cfg, grid, rng)?;
        let target = context.clone();
        let predictor = Predictor::new(cfg, grid, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            context,
            target,
            predictor,
        })
    }

    pub fn grid(&self) -> GridShape {
        self.context.grid()
    }

    /// Encodes only the context patches of the plan.
    pub fn encode_context(
        &self,
        patches: ArrayView2<F>,
        plan: &MaskPlan,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        if plan.context.is_empty() {
            return Err(Error::DegenerateMask("empty context mask".into()));
        }
        self.context
            .forward(patches, plan.context.indices(), KeyExclusion::None)
    }

    /// Target encoder over the whole grid, before target normalization.
    pub fn encode_target_trunk(&self, patches: ArrayView2<F>) -> Result<Array2<F>> {
        let all: Vec<usize> = (0..self.grid().len()).collect();
        Ok(self.target.forward(patches, &all, KeyExclusion::None)?.0)
    }

    /// Full-grid target features, one row per patch in raster order.
    pub fn encode_target(&self, patches: ArrayView2<F>, norm: TargetNorm) -> Result<Array2<F>> {
        let trunk = self.encode_target_trunk(patches)?;
        Ok(match norm {
            TargetNorm::LayerNorm => layers::normalize_rows(trunk.view()).0,
            TargetNorm::None => trunk,
        })
    }

    pub fn predict_targets(
        &self,
        ctx: ArrayView2<F>,
        ctx_pos: &[usize],
        targets: &MaskIndexSet,
    ) -> Result<(Array2<F>, PredictorCache<F>)> {
        self.predictor.forward(ctx, ctx_pos, targets.indices())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_store("encoder", &self.context.params);
        ck.push_store("target", &self.target.params);
        ck.push_store("predictor", &self.predictor.params);
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("encoder", &mut self.context.params)?;
        ck.load_store("target", &mut self.target.params)?;
        ck.load_store("predictor", &mut self.predictor.params)
    }
}
