//! Patch-embedding ViT encoder shared by the context and target networks.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{
    block_backward, block_forward, layer_norm, layer_norm_backward, linear_backward_params,
    BlockCache, BlockIds, LinearIds, NormCache, NormIds,
};
use super::params::ParamStore;
use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};
use crate::maskgen::GridShape;
use crate::spectro::sincos_positions;

/// Which attention keys to drop, per encoder layer.
#[derive(Debug, Clone, Copy, Default)]
pub enum KeyExclusion<'a> {
    #[default]
    None,
    /// The same flags in every layer.
    Shared(&'a [bool]),
    /// One flag vector per layer.
    PerLayer(&'a [Vec<bool>]),
}

impl<'a> KeyExclusion<'a> {
    fn layer(&self, l: usize) -> Option<&'a [bool]> {
        match *self {
            KeyExclusion::None => None,
            KeyExclusion::Shared(flags) => Some(flags),
            KeyExclusion::PerLayer(layers) => Some(layers[l].as_slice()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout {
    pub patch_proj: LinearIds,
    pub blocks: Vec<BlockIds>,
    pub norm: NormIds,
}

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub layout: EncoderLayout,
    pub params: ParamStore<F>,
    pos: Array2<F>,
    n_heads: usize,
    grid: GridShape,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    inputs: Array2<F>,
    pub blocks: Vec<BlockCache<F>>,
    norm: NormCache<F>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, grid: GridShape, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut params = ParamStore::new();
        let patch_proj = LinearIds::register(&mut params, "patch_proj", cfg.patch_len, d, rng);
        let blocks = (0..cfg.enc_depth)
            .map(|l| BlockIds::register(&mut params, &format!("blocks.{l}"), d, cfg.mlp_hidden(d), rng))
            .collect();
        let norm = NormIds::register(&mut params, "norm", d);
        Ok(Self {
            layout: EncoderLayout {
                patch_proj,
                blocks,
                norm,
            },
            params,
            pos: sincos_positions(grid.rows, grid.cols, d)?.mapv(F::of),
            n_heads: cfg.n_heads,
            grid,
        })
    }

    /// Same architecture with other weights (e.g. the EMA copy or a loaded
    /// checkpoint).
    pub fn with_params(&self, params: ParamStore<F>) -> Result<Self> {
        self.params.check_compatible(&params)?;
        Ok(Self {
            layout: self.layout.clone(),
            params,
            pos: self.pos.clone(),
            n_heads: self.n_heads,
            grid: self.grid,
        })
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    pub fn embed_dim(&self) -> usize {
        self.pos.ncols()
    }

    pub fn positions(&self) -> &Array2<F> {
        &self.pos
    }

    /// `token_i = patch_i W + b + pos_i` for the selected grid positions.
    pub fn embed(&self, patches: ArrayView2<F>, positions: &[usize]) -> Result<Array2<F>> {
        self.check_inputs(patches, positions)?;
        let inputs = patches.select(Axis(0), positions);
        Ok(self.embed_selected(inputs.view(), positions))
    }

    fn embed_selected(&self, inputs: ArrayView2<F>, positions: &[usize]) -> Array2<F> {
        let mut x = super::layers::linear(inputs, &self.params, self.layout.patch_proj);
        x += &self.pos.select(Axis(0), positions);
        x
    }

    fn check_inputs(&self, patches: ArrayView2<F>, positions: &[usize]) -> Result<()> {
        let expect_len = self.params.get(self.layout.patch_proj.w).shape[0];
        if patches.nrows() != self.grid.len() || patches.ncols() != expect_len {
            return Err(Error::Shape(format!(
                "patch grid {:?} does not match {} tokens of length {expect_len}",
                patches.dim(),
                self.grid.len()
            )));
        }
        if positions.is_empty() {
            return Err(Error::DegenerateMask("no tokens to encode".into()));
        }
        if positions.iter().any(|&p| p >= self.grid.len()) {
            return Err(Error::Shape("token position outside the grid".into()));
        }
        Ok(())
    }

    /// Runs the selected patches through embedding, all blocks, and the final
    /// layer norm. Output row `i` belongs to `positions[i]`.
    pub fn forward(
        &self,
        patches: ArrayView2<F>,
        positions: &[usize],
        exclusion: KeyExclusion<'_>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        self.check_inputs(patches, positions)?;
        if let KeyExclusion::PerLayer(layers) = exclusion {
            if layers.len() != self.layout.blocks.len() {
                return Err(Error::Shape("one exclusion mask per layer required".into()));
            }
        }
        let inputs = patches.select(Axis(0), positions);
        let mut x = self.embed_selected(inputs.view(), positions);
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for (l, ids) in self.layout.blocks.iter().enumerate() {
            let (y, cache) = block_forward(x, &self.params, ids, self.n_heads, exclusion.layer(l))?;
            x = y;
            blocks.push(cache);
        }
        let (out, norm) = layer_norm(x.view(), &self.params, self.layout.norm);
        Ok((out, EncoderCache { inputs, blocks, norm }))
    }

    /// Accumulates parameter gradients for `dout` (gradient of the loss
    /// w.r.t. the forward output).
    pub fn backward(&self, cache: &EncoderCache<F>, dout: ArrayView2<F>, grads: &mut ParamStore<F>) {
        let mut dx = layer_norm_backward(&cache.norm, dout, &self.params, self.layout.norm, grads);
        for (ids, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            dx = block_backward(bc, dx, &self.params, ids, grads);
        }
        linear_backward_params(cache.inputs.view(), dx.view(), self.layout.patch_proj, grads);
    }
}
