//! Layers built on the autodiff core, and the checkpoint archive.

pub mod checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;

/// Uniform `U(−bound, bound)` initialization.
pub fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)))
}

pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(−1/√in, 1/√in)`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), uniform_tensor(in_dim, out_dim, bound, rng))?;
        let bias = store.add(&format!("{name}.bias"), uniform_tensor(1, out_dim, bound, rng))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Batch normalization with learnable affine terms and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(1, features, T::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(1, features))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(1, features))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(1, features, T::one()))?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, store, self.running_mean, self.running_var)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(1, features, T::one()))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(1, features))?,
        })
    }

    pub fn forward<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;
