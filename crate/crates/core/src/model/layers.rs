//! Transformer building blocks with explicit forward caches and backward
//! passes. Gradients accumulate into a store shaped like the parameters.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::Scalar;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    /// Weight `[d_in x d_out]`, truncated-normal; bias zero.
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add_trunc_normal(format!("{name}.weight"), &[d_in, d_out], rng),
            b: store.add_filled(format!("{name}.bias"), &[d_out], 0.0),
        }
    }
}

pub fn linear<F: Scalar>(x: ArrayView2<F>, p: &ParamStore<F>, ids: LinearIds) -> Array2<F> {
    let mut y = x.dot(&p.mat(ids.w));
    y += &p.vec(ids.b);
    y
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn linear_backward<F: Scalar>(
    x: ArrayView2<F>,
    dy: ArrayView2<F>,
    p: &ParamStore<F>,
    ids: LinearIds,
    g: &mut ParamStore<F>,
) -> Array2<F> {
    linear_backward_params(x, dy, ids, g);
    dy.dot(&p.mat(ids.w).t())
}

pub fn linear_backward_params<F: Scalar>(
    x: ArrayView2<F>,
    dy: ArrayView2<F>,
    ids: LinearIds,
    g: &mut ParamStore<F>,
) {
    general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut g.mat_mut(ids.w));
    let db = dy.sum_axis(Axis(0));
    g.vec_mut(ids.b).zip_mut_with(&db, |a, &b| *a += b);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormIds {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), &[dim], 1.0),
            bias: store.add_filled(format!("{name}.bias"), &[dim], 0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

/// Per-row standardization without affine parameters.
pub fn normalize_rows<F: Scalar>(x: ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::<F>::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let rv = *r;
        row.mapv_inplace(|v| v * rv);
    }
    (xhat, rstd)
}

pub fn layer_norm<F: Scalar>(
    x: ArrayView2<F>,
    p: &ParamStore<F>,
    ids: NormIds,
) -> (Array2<F>, NormCache<F>) {
    let (xhat, rstd) = normalize_rows(x);
    let mut y = &xhat * &p.vec(ids.gain);
    y += &p.vec(ids.bias);
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &NormCache<F>,
    dy: ArrayView2<F>,
    p: &ParamStore<F>,
    ids: NormIds,
    g: &mut ParamStore<F>,
) -> Array2<F> {
    let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
    g.vec_mut(ids.gain).zip_mut_with(&dgain, |a, &b| *a += b);
    let dbias = dy.sum_axis(Axis(0));
    g.vec_mut(ids.bias).zip_mut_with(&dbias, |a, &b| *a += b);
    let dxhat = &dy * &p.vec(ids.gain);
    normalize_backward(&cache.xhat, &cache.rstd, dxhat)
}

/// Input gradient of [`normalize_rows`] given the gradient w.r.t. `xhat`.
fn normalize_backward<F: Scalar>(xhat: &Array2<F>, rstd: &Array1<F>, mut dxhat: Array2<F>) -> Array2<F> {
    let d = F::of(xhat.ncols() as f64);
    Zip::from(dxhat.rows_mut())
        .and(xhat.rows())
        .and(rstd)
        .for_each(|mut dx, xh, &r| {
            let mean_d = dx.sum() / d;
            let mean_dx = dx.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / d;
            Zip::from(&mut dx)
                .and(&xh)
                .for_each(|v, &h| *v = r * (*v - mean_d - h * mean_dx));
        });
    dxhat
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let (k, c, half) = (F::of(GELU_K), F::of(GELU_C), F::of(0.5));
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let (k, c, half) = (F::of(GELU_K), F::of(GELU_C), F::of(0.5));
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub qkv: LinearIds,
    pub proj: LinearIds,
}

#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    x: Array2<F>,
    qkv: Array2<F>,
    /// Softmax weights per head, `[queries x keys]`.
    pub probs: Vec<Array2<F>>,
    merged: Array2<F>,
}

/// Row-wise softmax over the keys not flagged in `excluded`; excluded keys get
/// weight zero for every query.
fn masked_softmax_rows<F: Scalar>(scores: &mut Array2<F>, excluded: Option<&[bool]>) {
    for mut row in scores.rows_mut() {
        let keep = |j: usize| excluded.is_none_or(|e| !e[j]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .fold(F::neg_infinity(), |m, (_, &v)| m.max(v));
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if keep(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = F::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product self-attention. Keys flagged in `excluded`
/// are dropped from every query's softmax; excluded tokens still act as
/// queries.
pub fn attention<F: Scalar>(
    x: ArrayView2<F>,
    p: &ParamStore<F>,
    ids: AttnIds,
    n_heads: usize,
    excluded: Option<&[bool]>,
) -> Result<(Array2<F>, AttnCache<F>)> {
    let (n, d) = x.dim();
    if let Some(e) = excluded {
        if e.len() != n {
            return Err(Error::Shape(format!(
                "exclusion mask of {} flags for {n} tokens",
                e.len()
            )));
        }
        if e.iter().all(|&v| v) {
            return Err(Error::DegenerateMask("every attention key is excluded".into()));
        }
    }
    let dh = d / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let qkv = linear(x, p, ids.qkv);
    let mut merged = Array2::<F>::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut scores = q.dot(&k.t());
        scores.mapv_inplace(|v| v * scale);
        masked_softmax_rows(&mut scores, excluded);
        general_mat_mul(
            F::one(),
            &scores,
            &v,
            F::zero(),
            &mut merged.slice_mut(s![.., h * dh..(h + 1) * dh]),
        );
        probs.push(scores);
    }
    let out = linear(merged.view(), p, ids.proj);
    Ok((
        out,
        AttnCache {
            x: x.to_owned(),
            qkv,
            probs,
            merged,
        },
    ))
}

pub fn attention_backward<F: Scalar>(
    cache: &AttnCache<F>,
    dy: ArrayView2<F>,
    p: &ParamStore<F>,
    ids: AttnIds,
    g: &mut ParamStore<F>,
) -> Array2<F> {
    let n_heads = cache.probs.len();
    let (n, d) = cache.merged.dim();
    let dh = d / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let dmerged = linear_backward(cache.merged.view(), dy, p, ids.proj, g);
    let mut dqkv = Array2::<F>::zeros((n, 3 * d));
    for (h, probs) in cache.probs.iter().enumerate() {
        let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
        let q = cache.qkv.slice(s![.., qc..qc + dh]);
        let k = cache.qkv.slice(s![.., kc..kc + dh]);
        let v = cache.qkv.slice(s![.., vc..vc + dh]);
        let dout = dmerged.slice(s![.., h * dh..(h + 1) * dh]);

        general_mat_mul(F::one(), &probs.t(), &dout, F::zero(), &mut dqkv.slice_mut(s![.., vc..vc + dh]));
        let mut dscores = dout.dot(&v.t());
        Zip::from(dscores.rows_mut())
            .and(probs.rows())
            .for_each(|mut ds, pr| {
                let dot = ds.iter().zip(&pr).map(|(&a, &b)| a * b).sum::<F>();
                Zip::from(&mut ds).and(&pr).for_each(|x, &pv| *x = pv * (*x - dot) * scale);
            });
        general_mat_mul(F::one(), &dscores, &k, F::zero(), &mut dqkv.slice_mut(s![.., qc..qc + dh]));
        general_mat_mul(F::one(), &dscores.t(), &q, F::zero(), &mut dqkv.slice_mut(s![.., kc..kc + dh]));
    }
    linear_backward(cache.x.view(), dqkv.view(), p, ids.qkv, g)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub norm1: NormIds,
    pub attn: AttnIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl BlockIds {
    pub fn register<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: NormIds::register(store, &format!("{name}.norm1"), dim),
            attn: AttnIds {
                qkv: LinearIds::register(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng),
                proj: LinearIds::register(store, &format!("{name}.attn.proj"), dim, dim, rng),
            },
            norm2: NormIds::register(store, &format!("{name}.norm2"), dim),
            fc1: LinearIds::register(store, &format!("{name}.mlp.fc1"), dim, hidden, rng),
            fc2: LinearIds::register(store, &format!("{name}.mlp.fc2"), hidden, dim, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    norm1: NormCache<F>,
    pub attn: AttnCache<F>,
    norm2: NormCache<F>,
    h2: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

pub fn block_forward<F: Scalar>(
    x: Array2<F>,
    p: &ParamStore<F>,
    ids: &BlockIds,
    n_heads: usize,
    excluded: Option<&[bool]>,
) -> Result<(Array2<F>, BlockCache<F>)> {
    let (h1, norm1) = layer_norm(x.view(), p, ids.norm1);
    let (a, attn) = attention(h1.view(), p, ids.attn, n_heads, excluded)?;
    let x1 = x + &a;
    let (h2, norm2) = layer_norm(x1.view(), p, ids.norm2);
    let pre_act = linear(h2.view(), p, ids.fc1);
    let act = pre_act.mapv(gelu);
    let y = x1 + &linear(act.view(), p, ids.fc2);
    Ok((
        y,
        BlockCache {
            norm1,
            attn,
            norm2,
            h2,
            pre_act,
            act,
        },
    ))
}

pub fn block_backward<F: Scalar>(
    cache: &BlockCache<F>,
    dy: Array2<F>,
    p: &ParamStore<F>,
    ids: &BlockIds,
    g: &mut ParamStore<F>,
) -> Array2<F> {
    let mut dact = linear_backward(cache.act.view(), dy.view(), p, ids.fc2, g);
    Zip::from(&mut dact)
        .and(&cache.pre_act)
        .for_each(|d, &u| *d *= gelu_grad(u));
    let dh2 = linear_backward(cache.h2.view(), dact.view(), p, ids.fc1, g);
    let dx1 = dy + &layer_norm_backward(&cache.norm2, dh2.view(), p, ids.norm2, g);
    let dh1 = attention_backward(&cache.attn, dx1.view(), p, ids.attn, g);
    let dn1 = layer_norm_backward(&cache.norm1, dh1.view(), p, ids.norm1, g);
    dx1 + &dn1
}
