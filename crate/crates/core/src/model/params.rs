//! Named, shaped parameter arrays.
//!
//! Networks register their arrays in a fixed order and keep the returned
//! [`ParamId`]s; gradients and optimizer moments live in stores created with
//! [`ParamStore::zeros_like`], so every per-array loop is a zip over two
//! stores.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F> Param<F> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

/// Standard deviation for projection weights and mask tokens.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<F>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::of(value); n])
    }

    pub fn add_trunc_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = trunc_normal(n, INIT_STD, rng).into_iter().map(F::of).collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, F> {
        let p = &self.params[id.0];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("rank-2 parameter")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let p = &mut self.params[id.0];
        ArrayViewMut2::from_shape((p.shape[0], p.shape[1]), &mut p.data)
            .expect("rank-2 parameter")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.params[id.0].data)
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.params[id.0].data)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![F::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Same names and shapes in the same order.
    pub fn check_compatible<G>(&self, other: &ParamStore<G>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "parameter stores hold {} and {} arrays",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| G::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParamStore<F>, alpha: F) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Euclidean distance over all arrays, accumulated in f64.
    pub fn distance(&self, other: &ParamStore<F>) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .fold(0.0, |m, v| m.max(v.f64().abs()))
    }
}
