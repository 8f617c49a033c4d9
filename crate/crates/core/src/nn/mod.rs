//! Dense layers with hand-written backward passes, plus the optimizer.
//!
//! Every trainable structure implements [`Params`], which exposes its tensors
//! as flat slices in a fixed order. Gradients are stored in a value of the
//! same type, so parameters and gradients line up tensor by tensor.

mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// A copy with every tensor set to zero, for use as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine map `y = x W + b` with `W` stored as (in, out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(input, output, std, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice2(&self.weight), slice1(&self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice2_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Saved activations of a [`LayerNorm`] forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let s = *r;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = r / d * (d * gi - sum_g - xi * sum_gx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice1(&self.gamma), slice1(&self.beta)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice1_mut(&mut self.gamma), slice1_mut(&mut self.beta)]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences over every parameter of a [`Params`] value.

    use super::Params;

    /// Returns the numerical gradient of `loss` with respect to every
    /// parameter, tensor by tensor.
    pub fn numeric_grad<P, F>(params: &P, h: f64, loss: F) -> Vec<Vec<f64>>
    where
        P: Params + Clone,
        F: Fn(&P) -> f64,
    {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let mut out = Vec::new();
        let mut probe = params.clone();
        for (ti, &len) in shapes.iter().enumerate() {
            let mut g = vec![0.0; len];
            for (i, gi) in g.iter_mut().enumerate() {
                let orig = probe.tensors()[ti][i];
                probe.tensors_mut()[ti][i] = orig + h;
                let plus = loss(&probe);
                probe.tensors_mut()[ti][i] = orig - h;
                let minus = loss(&probe);
                probe.tensors_mut()[ti][i] = orig;
                *gi = (plus - minus) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    /// `||a - b|| / max(||a||, ||b||)` over one tensor. Tensors whose true
    /// gradient vanishes (e.g. attention key biases, which softmax cancels)
    /// are compared absolutely, since finite differences only yield noise.
    pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nb);
        if denom < 1e-6 {
            diff
        } else {
            diff / denom
        }
    }

    pub fn assert_grads_match<P: Params>(analytic: &P, numeric: &[Vec<f64>], tol: f64) {
        for (i, (a, n)) in analytic.tensors().iter().zip(numeric).enumerate() {
            let err = relative_error(a, n);
            assert!(err < tol, "tensor {i}: relative error {err:e}");
        }
    }
}
