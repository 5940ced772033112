//! Dense row-major FP32 tensors and the numeric kernels the autodiff tape is
//! built on.
//!
//! Forward kernels here are shared by the training graph and the inference
//! path, so both compute bit-identical values for the same inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, HgfError, Result};

/// Layernorm variance epsilon (PyTorch default).
pub const LAYERNORM_EPS: f64 = 1e-5;

/// An n-dimensional FP32 array stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    /// Builds a tensor, rejecting inconsistent shapes and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HgfError::NonFinite(format!("tensor construction (element {pos})")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Uniform samples in `[lo, hi)` from a ChaCha stream seeded with `seed`.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::uniform_with(shape, lo, hi, &mut rng)
    }

    pub fn uniform_with(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the flat buffer. Callers are responsible for keeping
    /// entries finite; graph leaves re-validate on entry.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of rows when the tensor is viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(HgfError::NonFinite(format!("{what} (element {pos})"))),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// 2-D product `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.ndim() != 2 || rhs.ndim() != 2 {
            return Err(dim_err("matmul", "both operands must be 2-D"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(dim_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        Ok(Self::from_parts(vec![m, n], gemm_nn(&self.data, &rhs.data, m, k, n)))
    }
}

// ---------------------------------------------------------------------------
// GEMM kernels. Every output element accumulates over the inner dimension in
// ascending order, so results do not depend on blocking.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
        i += 1;
    }
}

pub(crate) fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm_nn_acc(a, b, &mut c, m, k, n);
    c
}

pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let at = transpose(a, k, m);
    gemm_nn(&at, b, m, k, n)
}

// ---------------------------------------------------------------------------
// Elementwise and normalization kernels.

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &DenseTensor) -> DenseTensor {
    map(x, |v| v * sigmoid(v))
}

pub fn tanh(x: &DenseTensor) -> DenseTensor {
    map(x, f32::tanh)
}

pub(crate) fn map(x: &DenseTensor, f: impl Fn(f32) -> f32) -> DenseTensor {
    DenseTensor::from_parts(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect())
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(x: &DenseTensor, axis: usize) -> Result<DenseTensor> {
    if axis >= x.ndim() {
        return Err(dim_err(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape),
        ));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.numel()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x.data[at(j)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x.data[at(j)] as f64 - max).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[at(j)] = (b / sum) as f32;
            }
        }
    }
    Ok(DenseTensor::from_parts(x.shape.clone(), out))
}

/// Softmax over the last axis of `[groups, len, len]` score blocks with a
/// strictly causal mask: row `i` only sees columns `j <= i`; masked entries are 0.
pub(crate) fn causal_softmax(scores: &[f32], groups: usize, len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; scores.len()];
    let mut buf = vec![0.0f64; len];
    for g in 0..groups {
        for i in 0..len {
            let row = &scores[(g * len + i) * len..(g * len + i) * len + i + 1];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for (b, &s) in buf.iter_mut().zip(row) {
                *b = (s as f64 - max).exp();
                sum += *b;
            }
            let dst = &mut out[(g * len + i) * len..(g * len + i) * len + i + 1];
            for (d, b) in dst.iter_mut().zip(&buf) {
                *d = (b / sum) as f32;
            }
        }
    }
    out
}

/// Per-row statistics saved by [`layernorm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each row of the last axis to zero mean / unit variance, then
/// applies `gain` and `bias`.
pub(crate) fn layernorm_forward(x: &[f32], gain: &[f32], bias: &[f32], width: usize) -> (Vec<f32>, NormStats) {
    let rows = x.len() / width;
    let mut out = vec![0.0f32; x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mu = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
        let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for (j, (o, &v)) in out[r * width..(r + 1) * width].iter_mut().zip(row).enumerate() {
            *o = (((v as f64 - mu) * rs) as f32) * gain[j] + bias[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, NormStats { mean, rstd })
}

pub fn layernorm(x: &DenseTensor, gain: &DenseTensor, bias: &DenseTensor) -> Result<DenseTensor> {
    let width = x.last_dim();
    if gain.numel() != width || bias.numel() != width {
        return Err(dim_err("layernorm", format!("affine width must be {width}")));
    }
    let (out, _) = layernorm_forward(&x.data, &gain.data, &bias.data, width);
    Ok(DenseTensor::from_parts(x.shape.clone(), out))
}

/// Mean cross-entropy over rows of `logits[rows×vocab]`. Returns the loss and
/// the softmax probabilities (needed for the gradient).
pub(crate) fn cross_entropy_forward(logits: &[f32], targets: &[usize], vocab: usize) -> Result<(f64, Vec<f32>)> {
    let rows = logits.len() / vocab;
    if targets.len() != rows {
        return Err(dim_err(
            "cross_entropy",
            format!("{} targets for {rows} rows", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(HgfError::Index {
            index: bad,
            size: vocab,
        });
    }
    let mut probs = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[t] as f64;
        for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *p = ((v as f64 - log_z).exp()) as f32;
        }
    }
    Ok((total / rows as f64, probs))
}

pub fn cross_entropy(logits: &DenseTensor, targets: &[usize]) -> Result<f32> {
    let (loss, _) = cross_entropy_forward(&logits.data, targets, logits.last_dim())?;
    Ok(loss as f32)
}
