//! Named parameter tensors and the handful of dense kernels the models need.
//!
//! Parameters live in a flat [`ParamSet`]; layers hold [`TensorId`] handles
//! into it. A gradient buffer is simply another `ParamSet` with the same
//! layout (see [`ParamSet::zeros_like`]), which keeps checkpointing, the
//! optimizer and finite-difference checks generic over every layer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { name: name.into(), shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        ParamSet { tensors }
    }

    pub fn add(&mut self, tensor: Tensor) -> TensorId {
        debug_assert!(self.find(&tensor.name).is_none(), "duplicate tensor {}", tensor.name);
        self.tensors.push(tensor);
        TensorId(self.tensors.len() - 1)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> TensorId {
        self.add(Tensor::zeros(name, shape))
    }

    /// Uniform fan-in initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> TensorId {
        let mut t = Tensor::zeros(name, shape);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for v in &mut t.data {
            *v = rng.random_range(-bound..bound);
        }
        self.add(t)
    }

    pub fn get(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name).map(TensorId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), &t.shape))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|&x| x == 0.0))
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `[n_out, n_in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: TensorId,
    pub b: TensorId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let w = params.add_uniform(format!("{name}.weight"), &[n_out, n_in], n_in, rng);
        let b = params.add_zeros(format!("{name}.bias"), &[n_out]);
        Linear { w, b, n_in, n_out }
    }

    pub fn zeroed(params: &mut ParamSet, name: &str, n_in: usize, n_out: usize) -> Self {
        let w = params.add_zeros(format!("{name}.weight"), &[n_out, n_in]);
        let b = params.add_zeros(format!("{name}.bias"), &[n_out]);
        Linear { w, b, n_in, n_out }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut y = params.get(self.b).data.clone();
        matvec_acc(&params.get(self.w).data, self.n_out, self.n_in, x, &mut y);
        y
    }

    /// Accumulate parameter gradients and return `dL/dx`.
    pub fn backward(&self, params: &ParamSet, grads: &mut ParamSet, x: &[f64], dy: &[f64]) -> Vec<f64> {
        outer_acc(&mut grads.get_mut(self.w).data, dy, x);
        for (g, d) in grads.get_mut(self.b).data.iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.n_in];
        matvec_t_acc(&params.get(self.w).data, self.n_out, self.n_in, dy, &mut dx);
        dx
    }
}

/// `y += W x` for row-major `W` of shape `[rows, cols]`.
pub fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, yr) in y.iter_mut().enumerate().take(rows) {
        *yr += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `y += Wᵀ x` for row-major `W` of shape `[rows, cols]`.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    for r in 0..rows {
        let xr = x[r];
        if xr != 0.0 {
            axpy(xr, &w[r * cols..(r + 1) * cols], y);
        }
    }
}

/// `G += a ⊗ b` for row-major `G` of shape `[a.len(), b.len()]`.
pub fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar != 0.0 {
            axpy(ar, b, &mut g[r * cols..(r + 1) * cols]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Backward of softmax: given `p = softmax(z)` and `dL/dp`, return `dL/dz`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
