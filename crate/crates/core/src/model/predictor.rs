//! Narrow transformer that predicts target-position features from context
//! features plus positional mask tokens.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{
    block_backward, block_forward, layer_norm, layer_norm_backward, linear, linear_backward,
    BlockCache, BlockIds, LinearIds, NormCache, NormIds,
};
use super::params::{ParamId, ParamStore};
use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};
use crate::maskgen::GridShape;
use crate::spectro::sincos_positions;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorLayout {
    pub proj_in: LinearIds,
    pub mask_token: ParamId,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
    pub proj_out: LinearIds,
}

#[derive(Debug, Clone)]
pub struct Predictor<F> {
    pub layout: PredictorLayout,
    pub params: ParamStore<F>,
    /// Separate sin-cos table at the predictor width.
    pos: Array2<F>,
    n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct PredictorCache<F> {
    ctx_in: Array2<F>,
    n_ctx: usize,
    blocks: Vec<BlockCache<F>>,
    norm: NormCache<F>,
    normed_targets: Array2<F>,
}

impl<F: Scalar> Predictor<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, grid: GridShape, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, pd) = (cfg.embed_dim, cfg.pred_dim);
        let mut params = ParamStore::new();
        let proj_in = LinearIds::register(&mut params, "proj_in", d, pd, rng);
        let mask_token = params.add_trunc_normal("mask_token", &[pd], rng);
        let blocks = (0..cfg.pred_depth)
            .map(|l| BlockIds::register(&mut params, &format!("blocks.{l}"), pd, cfg.mlp_hidden(pd), rng))
            .collect();
        let norm = NormIds::register(&mut params, "norm", pd);
        let proj_out = LinearIds::register(&mut params, "proj_out", pd, d, rng);
        Ok(Self {
            layout: PredictorLayout {
                proj_in,
                mask_token,
                blocks,
                norm,
                proj_out,
            },
            params,
            pos: sincos_positions(grid.rows, grid.cols, pd)?.mapv(F::of),
            n_heads: cfg.n_heads,
        })
    }

    pub fn with_params(&self, params: ParamStore<F>) -> Result<Self> {
        self.params.check_compatible(&params)?;
        Ok(Self {
            layout: self.layout.clone(),
            params,
            pos: self.pos.clone(),
            n_heads: self.n_heads,
        })
    }

    /// Predicted `[targets x embed_dim]` features for one target set.
    pub fn forward(
        &self,
        ctx: ArrayView2<F>,
        ctx_pos: &[usize],
        target_pos: &[usize],
    ) -> Result<(Array2<F>, PredictorCache<F>)> {
        if ctx.nrows() != ctx_pos.len() {
            return Err(Error::Shape("context features and positions differ in length".into()));
        }
        if ctx_pos.is_empty() || target_pos.is_empty() {
            return Err(Error::DegenerateMask("predictor needs context and targets".into()));
        }
        if target_pos.iter().any(|t| ctx_pos.contains(t)) {
            return Err(Error::Precondition(
                "target positions overlap the context".into(),
            ));
        }
        if ctx_pos.iter().chain(target_pos).any(|&p| p >= self.pos.nrows()) {
            return Err(Error::Shape("position outside the grid".into()));
        }
        let mut z = linear(ctx, &self.params, self.layout.proj_in);
        z += &self.pos.select(Axis(0), ctx_pos);
        let mut m = self.pos.select(Axis(0), target_pos);
        m += &self.params.vec(self.layout.mask_token);
        let mut x = concatenate![Axis(0), z, m];

        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for ids in &self.layout.blocks {
            let (y, cache) = block_forward(x, &self.params, ids, self.n_heads, None)?;
            x = y;
            blocks.push(cache);
        }
        let (h, norm) = layer_norm(x.view(), &self.params, self.layout.norm);
        let n_ctx = ctx_pos.len();
        let normed_targets = h.slice(s![n_ctx.., ..]).to_owned();
        let out = linear(normed_targets.view(), &self.params, self.layout.proj_out);
        Ok((
            out,
            PredictorCache {
                ctx_in: ctx.to_owned(),
                n_ctx,
                blocks,
                norm,
                normed_targets,
            },
        ))
    }

    /// Accumulates predictor gradients; returns the gradient w.r.t. the
    /// context features.
    pub fn backward(
        &self,
        cache: &PredictorCache<F>,
        dout: ArrayView2<F>,
        grads: &mut ParamStore<F>,
    ) -> Array2<F> {
        let p = &self.params;
        let dtargets = linear_backward(cache.normed_targets.view(), dout, p, self.layout.proj_out, grads);
        let n_total = cache.n_ctx + dtargets.nrows();
        let mut dh = Array2::<F>::zeros((n_total, dtargets.ncols()));
        dh.slice_mut(s![cache.n_ctx.., ..]).assign(&dtargets);
        let mut dx = layer_norm_backward(&cache.norm, dh.view(), p, self.layout.norm, grads);
        for (ids, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(bc, dx, p, ids, grads);
        }
        let dmask = dx.slice(s![cache.n_ctx.., ..]).sum_axis(Axis(0));
        grads
            .vec_mut(self.layout.mask_token)
            .zip_mut_with(&dmask, |a, &b| *a += b);
        linear_backward(
            cache.ctx_in.view(),
            dx.slice(s![..cache.n_ctx, ..]),
            p,
            self.layout.proj_in,
            grads,
        )
    }
}
