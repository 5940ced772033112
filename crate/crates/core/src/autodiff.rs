//! Reverse-mode automatic differentiation over a fixed, enumerated op set.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node whose parents
//! have strictly smaller indices, so walking the tape backwards is a reverse
//! topological order that visits each node once. Backward rules live in one
//! `match`, including the straight-through rules for the two quantizers.

use crate::error::{dim_err, HgfError, Result};
use crate::quant::{self, TernaryWeight};
use crate::tensor::{self, gemm_nn, gemm_nn_acc, gemm_nt, gemm_tn, DenseTensor, NormStats};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a[.., k] · b[k, n]`
    MatMul(Var, Var),
    /// `a[.., k] · b[n, k]ᵀ`
    MatMulNt(Var, Var),
    /// `a[g, m, k] · b[g, k, n]`
    BatchMatMul(Var, Var),
    /// `a[g, m, k] · b[g, n, k]ᵀ`
    BatchMatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a `[n]` vector over the last axis.
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    /// Multiply by a one-element tensor.
    MulScalar(Var, Var),
    Tanh(Var),
    Silu(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats,
    },
    CausalSoftmax {
        x: Var,
        groups: usize,
        len: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
        start: usize,
        count: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    RepeatInterleave {
        x: Var,
        times: usize,
    },
    /// Straight-through: forward is the ternary fake-quantized weight,
    /// backward is the identity.
    FakeQuantWeight(Var),
    /// Straight-through: forward is the per-token Int8 fake-quantized input,
    /// backward is the identity.
    FakeQuantAct(Var),
    /// Integer inference GEMM against packed trits. Not differentiable.
    TernaryLinear,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::BatchMatMul(..) => "bmm",
            Op::BatchMatMulNt(..) => "bmm_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::Abs(..) => "abs",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::LayerNorm { .. } => "layernorm",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::RepeatInterleave { .. } => "repeat_interleave",
            Op::FakeQuantWeight(..) => "fake_quant_weight",
            Op::FakeQuantAct(..) => "fake_quant_act",
            Op::TernaryLinear => "ternary_linear",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::TernaryLinear => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::BatchMatMul(a, b)
            | Op::BatchMatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalar(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Abs(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::FakeQuantWeight(a)
            | Op::FakeQuantAct(a) => vec![a],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::CausalSoftmax { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::RepeatInterleave { x, .. } => vec![x],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; an exact zero tensor when no
    /// path connects `v` to the loss.
    pub fn get(&self, v: Var) -> DenseTensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => DenseTensor::from_parts(shape, g.clone()),
            None => DenseTensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(op: &'static str, a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("non-empty shape") = last;
    s
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn column_sums(g: &[f32], width: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; width];
    for row in g.chunks(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

impl Graph {
    /// A graph that records gradients for parameter leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never requires gradients (evaluation mode).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Result<Var> {
        value.check_finite(op.name())?;
        let needs_grad = self.grad_enabled && op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: DenseTensor, trainable: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        let needs_grad = self.grad_enabled && trainable;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: DenseTensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: DenseTensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.ndim() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(dim_err("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), bv.shape()[0], bv.shape()[1]);
        let out = gemm_nn(av.data(), bv.data(), m, k, n);
        let shape = with_last(av.shape(), n);
        self.push(DenseTensor::from_parts(shape, out), Op::MatMul(a, b))
    }

    /// `a · bᵀ` with `b` stored `[n, k]` (the usual `[out, in]` weight layout).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.ndim() != 2 || av.last_dim() != bv.shape()[1] {
            return Err(dim_err("matmul_nt", format!("{:?} · {:?}ᵀ", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.rows(), bv.shape()[1], bv.shape()[0]);
        let out = gemm_nt(av.data(), bv.data(), m, k, n);
        let shape = with_last(av.shape(), n);
        self.push(DenseTensor::from_parts(shape, out), Op::MatMulNt(a, b))
    }

    fn batch_dims(op: &'static str, a: &DenseTensor, b: &DenseTensor) -> Result<(usize, usize, usize)> {
        if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(dim_err(op, format!("{:?} with {:?}", a.shape(), b.shape())));
        }
        Ok((a.shape()[0], a.shape()[1], a.shape()[2]))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (g, m, k) = Self::batch_dims("bmm", av, bv)?;
        if bv.shape()[1] != k {
            return Err(dim_err("bmm", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let n = bv.shape()[2];
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm_nn_acc(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(DenseTensor::from_parts(vec![g, m, n], out), Op::BatchMatMul(a, b))
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (g, m, k) = Self::batch_dims("bmm_nt", av, bv)?;
        if bv.shape()[2] != k {
            return Err(dim_err("bmm_nt", format!("{:?} · {:?}ᵀ", av.shape(), bv.shape())));
        }
        let n = bv.shape()[1];
        let mut out = Vec::with_capacity(g * m * n);
        for i in 0..g {
            out.extend(gemm_nt(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
            ));
        }
        self.push(DenseTensor::from_parts(vec![g, m, n], out), Op::BatchMatMulNt(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op.name(), av, bv)?;
        let out = DenseTensor::from_parts(av.shape().to_vec(), zip_map(av.data(), bv.data(), f));
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let width = av.last_dim();
        if rv.numel() != width {
            return Err(dim_err(op.name(), format!("row of {} for width {width}", rv.numel())));
        }
        let mut out = Vec::with_capacity(av.numel());
        for chunk in av.data().chunks(width) {
            out.extend(chunk.iter().zip(rv.data()).map(|(&x, &r)| f(x, r)));
        }
        let out = DenseTensor::from_parts(av.shape().to_vec(), out);
        self.push(out, op)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, r| x + r)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, r| x * r)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = tensor::map(self.value(a), |v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err("mul_scalar", "scalar operand must have one element"));
        }
        let c = self.value(s).data()[0];
        let out = tensor::map(self.value(a), |v| v * c);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = tensor::tanh(self.value(a));
        self.push(out, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::silu(self.value(a));
        self.push(out, Op::Silu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = tensor::map(self.value(a), f32::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.numel() as f64;
        self.push(DenseTensor::scalar(m as f32), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|&x| x as f64).sum::<f64>();
        self.push(DenseTensor::scalar(s as f32), Op::Sum(a))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != width || bv.numel() != width {
            return Err(dim_err("layernorm", format!("affine width must be {width}")));
        }
        let (out, stats) = tensor::layernorm_forward(xv.data(), gv.data(), bv.data(), width);
        let out = DenseTensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::LayerNorm { x, gain, bias, stats })
    }

    /// Causal softmax over the last axis of `[groups, len, len]` scores.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 || xv.shape()[1] != xv.shape()[2] {
            return Err(dim_err(
                "causal_softmax",
                format!("expected [g, L, L], got {:?}", xv.shape()),
            ));
        }
        let (groups, len) = (xv.shape()[0], xv.shape()[1]);
        let out = tensor::causal_softmax(xv.data(), groups, len);
        let out = DenseTensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::CausalSoftmax { x, groups, len })
    }

    /// Gathers rows of `table[vocab, d]`; output shape is `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(dim_err("embedding", "table must be 2-D"));
        }
        if shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err("embedding", "id count does not match shape"));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(HgfError::Index { index: id, size: vocab });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let out = DenseTensor::from_parts(oshape, out);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean token cross-entropy of `logits[.., vocab]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (loss, probs) = tensor::cross_entropy_forward(lv.data(), targets, lv.last_dim())?;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(DenseTensor::scalar(loss as f32), op)
    }

    /// Selects heads `start..start+count` of `x[B, L, heads·w]` into `[B·count, L, w]`.
    pub fn split_heads(&mut self, x: Var, heads: usize, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 || xv.shape()[2] % heads != 0 || start + count > heads {
            return Err(dim_err(
                "split_heads",
                format!("{:?} into heads {start}..{} of {heads}", xv.shape(), start + count),
            ));
        }
        let (b, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let w = d / heads;
        let mut out = Vec::with_capacity(b * count * l * w);
        for bi in 0..b {
            for h in start..start + count {
                for li in 0..l {
                    let base = (bi * l + li) * d + h * w;
                    out.extend_from_slice(&xv.data()[base..base + w]);
                }
            }
        }
        let out = DenseTensor::from_parts(vec![b * count, l, w], out);
        self.push(out, Op::SplitHeads { x, heads, start, count })
    }

    /// Inverse of a full [`Graph::split_heads`]: `[B·heads, L, w]` → `[B, L, heads·w]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 || xv.shape()[0] % heads != 0 {
            return Err(dim_err("merge_heads", format!("{:?} with {heads} heads", xv.shape())));
        }
        let (bh, l, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let b = bh / heads;
        let d = heads * w;
        let mut out = vec![0.0; b * l * d];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let src = ((bi * heads + h) * l + li) * w;
                    let dst = (bi * l + li) * d + h * w;
                    out[dst..dst + w].copy_from_slice(&xv.data()[src..src + w]);
                }
            }
        }
        let out = DenseTensor::from_parts(vec![b, l, d], out);
        self.push(out, Op::MergeHeads { x, heads })
    }

    /// `[n]` → `[n·times]`, each entry repeated `times` times in place.
    pub fn repeat_interleave(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f32> = xv.data().iter().flat_map(|&v| std::iter::repeat_n(v, times)).collect();
        let out = DenseTensor::from_parts(vec![out.len()], out);
        self.push(out, Op::RepeatInterleave { x, times })
    }

    pub fn fake_quant_weight(&mut self, w: Var) -> Result<Var> {
        let wv = self.value(w);
        let out = DenseTensor::from_parts(wv.shape().to_vec(), quant::fake_quantize_weights(wv.data()));
        self.push(out, Op::FakeQuantWeight(w))
    }

    pub fn fake_quant_act(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = quant::fake_quantize_activations(xv.data(), xv.last_dim());
        let out = DenseTensor::from_parts(xv.shape().to_vec(), out);
        self.push(out, Op::FakeQuantAct(x))
    }

    /// Integer-path ternary linear on packed weights. The result is a constant:
    /// no gradient flows back to `x`.
    pub fn ternary_linear(&mut self, x: Var, w: &TernaryWeight) -> Result<Var> {
        let out = quant::ternary_forward(self.value(x), w)?;
        self.push(out, Op::TernaryLinear)
    }

    /// Runs the backward pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(HgfError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf | Op::TernaryLinear => {}
            &Op::MatMul(a, b) => {
                let (k, n) = (shape(b)[0], shape(b)[1]);
                let m = g.len() / n;
                if self.wants(a) {
                    self.accumulate(grads, a, gemm_nt(g, val(b), m, n, k));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, gemm_tn(val(a), g, m, k, n));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (n, k) = (shape(b)[0], shape(b)[1]);
                let m = g.len() / n;
                if self.wants(a) {
                    self.accumulate(grads, a, gemm_nn(g, val(b), m, n, k));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, gemm_tn(g, val(a), m, n, k));
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (groups, m, k) = (shape(a)[0], shape(a)[1], shape(a)[2]);
                let n = shape(b)[2];
                if self.wants(a) {
                    let mut da = Vec::with_capacity(groups * m * k);
                    for j in 0..groups {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        da.extend(gemm_nt(gj, &val(b)[j * k * n..(j + 1) * k * n], m, n, k));
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = Vec::with_capacity(groups * k * n);
                    for j in 0..groups {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        db.extend(gemm_tn(&val(a)[j * m * k..(j + 1) * m * k], gj, m, k, n));
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::BatchMatMulNt(a, b) => {
                let (groups, m, k) = (shape(a)[0], shape(a)[1], shape(a)[2]);
                let n = shape(b)[1];
                if self.wants(a) {
                    let mut da = Vec::with_capacity(groups * m * k);
                    for j in 0..groups {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        da.extend(gemm_nn(gj, &val(b)[j * n * k..(j + 1) * n * k], m, n, k));
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = Vec::with_capacity(groups * n * k);
                    for j in 0..groups {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        db.extend(gemm_tn(gj, &val(a)[j * m * k..(j + 1) * m * k], m, n, k));
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                if self.wants(b) {
                    self.accumulate(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, zip_map(g, val(b), |x, y| x * y));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, zip_map(g, val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.to_vec());
                if self.wants(row) {
                    self.accumulate(grads, row, column_sums(g, val(row).len()));
                }
            }
            &Op::MulRow(a, row) => {
                let r = val(row);
                let width = r.len();
                if self.wants(a) {
                    let mut da = Vec::with_capacity(g.len());
                    for chunk in g.chunks(width) {
                        da.extend(chunk.iter().zip(r).map(|(&x, &y)| x * y));
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(row) {
                    let prod = zip_map(g, val(a), |x, y| x * y);
                    self.accumulate(grads, row, column_sums(&prod, width));
                }
            }
            &Op::Scale(a, c) => {
                self.accumulate(grads, a, g.iter().map(|v| v * c).collect());
            }
            &Op::MulScalar(a, s) => {
                let c = val(s)[0];
                if self.wants(a) {
                    self.accumulate(grads, a, g.iter().map(|v| v * c).collect());
                }
                if self.wants(s) {
                    let ds: f64 = g.iter().zip(val(a)).map(|(&x, &y)| x as f64 * y as f64).sum();
                    self.accumulate(grads, s, vec![ds as f32]);
                }
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            &Op::Silu(a) => {
                let d = zip_map(g, val(a), |gv, x| {
                    let s = tensor::sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, a, d);
            }
            &Op::Abs(a) => {
                let d = zip_map(g, val(a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, a, d);
            }
            &Op::Mean(a) => {
                let n = val(a).len();
                self.accumulate(grads, a, vec![g[0] / n as f32; n]);
            }
            &Op::Sum(a) => {
                self.accumulate(grads, a, vec![g[0]; val(a).len()]);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let gv = val(gain);
                let width = gv.len();
                let xs = val(x);
                let mut dx = vec![0.0f32; xs.len()];
                let mut dgain = vec![0.0f64; width];
                let mut dbias = vec![0.0f64; width];
                let mut xhat = vec![0.0f64; width];
                let mut dxhat = vec![0.0f64; width];
                for r in 0..xs.len() / width {
                    let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                    let row = &xs[r * width..(r + 1) * width];
                    let grow = &g[r * width..(r + 1) * width];
                    let (mut mean_d, mut mean_dx) = (0.0f64, 0.0f64);
                    for j in 0..width {
                        xhat[j] = (row[j] as f64 - mu) * rs;
                        dxhat[j] = grow[j] as f64 * gv[j] as f64;
                        dgain[j] += grow[j] as f64 * xhat[j];
                        dbias[j] += grow[j] as f64;
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[j];
                    }
                    mean_d /= width as f64;
                    mean_dx /= width as f64;
                    for j in 0..width {
                        dx[r * width + j] = (rs * (dxhat[j] - mean_d - xhat[j] * mean_dx)) as f32;
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, gain, dgain.into_iter().map(|v| v as f32).collect());
                self.accumulate(grads, bias, dbias.into_iter().map(|v| v as f32).collect());
            }
            &Op::CausalSoftmax { x, groups, len } => {
                let y = node.value.data();
                let mut dx = vec![0.0f32; y.len()];
                for gi in 0..groups {
                    for r in 0..len {
                        let off = (gi * len + r) * len;
                        let dot: f64 = (0..=r).map(|j| g[off + j] as f64 * y[off + j] as f64).sum();
                        for j in 0..=r {
                            dx[off + j] = ((g[off + j] as f64 - dot) * y[off + j] as f64) as f32;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Embedding { table, ids } => {
                let d = shape(*table)[1];
                let mut dt = vec![0.0f32; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (t, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *t += gv;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = shape(*logits).last().copied().unwrap_or(1);
                let scale = g[0] / targets.len() as f32;
                let mut dl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * vocab + t] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            &Op::SplitHeads { x, heads, start, count } => {
                let xs = shape(x);
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let w = d / heads;
                let mut dx = vec![0.0f32; b * l * d];
                let mut src = 0;
                for bi in 0..b {
                    for h in start..start + count {
                        for li in 0..l {
                            let base = (bi * l + li) * d + h * w;
                            dx[base..base + w].copy_from_slice(&g[src..src + w]);
                            src += w;
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::MergeHeads { x, heads } => {
                let xs = shape(x);
                let (bh, l, w) = (xs[0], xs[1], xs[2]);
                let b = bh / heads;
                let d = heads * w;
                let mut dx = vec![0.0f32; bh * l * w];
                for bi in 0..b {
                    for h in 0..heads {
                        for li in 0..l {
                            let dst = ((bi * heads + h) * l + li) * w;
                            let src = (bi * l + li) * d + h * w;
                            dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::RepeatInterleave { x, times } => {
                let dx = g
                    .chunks(times)
                    .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::FakeQuantWeight(a) | &Op::FakeQuantAct(a) => {
                self.accumulate(grads, a, g.to_vec());
            }
        }
    }
}


/// Every differentiable op against central finite differences on random
/// inputs in [-2, 2].
#[cfg(test)]
mod fd_tests {
    use super::*;
    use crate::gradcheck::{central_differences, normwise_error, FD_STEP};
    use proptest::prelude::*;

    type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

    fn readout(out: &DenseTensor, seed: u64) -> DenseTensor {
        DenseTensor::uniform(out.shape(), -1.0, 1.0, seed ^ 0xfeed)
    }

    fn eval(inputs: &[DenseTensor], build: Build, seed: u64) -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
        let out = build(&mut g, &vars)?;
        let y = g.value(out);
        let c = readout(y, seed);
        Ok(y.data().iter().zip(c.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
    }

    fn max_error(inputs: &[DenseTensor], build: Build, seed: u64) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        let c = g.constant(readout(g.value(out), seed)).unwrap();
        let p = g.mul(out, c).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut worst = 0.0f64;
        for (i, &v) in vars.iter().enumerate() {
            let analytic: Vec<f64> = grads.get(v).data().iter().map(|&x| x as f64).collect();
            let base = inputs.to_vec();
            let fd = central_differences(
                &base,
                |t: &mut Vec<DenseTensor>| &mut t[i],
                |t| eval(t, build, seed),
                FD_STEP,
            )
            .unwrap();
            worst = worst.max(normwise_error(&analytic, &fd));
        }
        worst
    }

    fn rand(shape: &[usize], seed: u64) -> DenseTensor {
        DenseTensor::uniform(shape, -2.0, 2.0, seed)
    }

    const TOL: f64 = 1e-3;

    fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
        vec![
            ("matmul", vec![vec![3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1])),
            ("matmul_nt", vec![vec![2, 3, 4], vec![5, 4]], |g, v| {
                g.matmul_nt(v[0], v[1])
            }),
            ("bmm", vec![vec![2, 3, 4], vec![2, 4, 3]], |g, v| g.bmm(v[0], v[1])),
            ("bmm_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, v| {
                g.bmm_nt(v[0], v[1])
            }),
            ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
            ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
            ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
            ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
            ("mul_row", vec![vec![3, 4], vec![4]], |g, v| g.mul_row(v[0], v[1])),
            ("scale", vec![vec![3, 4]], |g, v| g.scale(v[0], -1.5)),
            ("mul_scalar", vec![vec![3, 4], vec![1]], |g, v| g.mul_scalar(v[0], v[1])),
            ("tanh", vec![vec![3, 4]], |g, v| g.tanh(v[0])),
            ("silu", vec![vec![3, 4]], |g, v| g.silu(v[0])),
            ("abs", vec![vec![3, 4]], |g, v| g.abs(v[0])),
            ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
            ("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
            ("layernorm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
                g.layernorm(v[0], v[1], v[2])
            }),
            ("causal_softmax", vec![vec![2, 4, 4]], |g, v| g.causal_softmax(v[0])),
            ("embedding", vec![vec![5, 3]], |g, v| {
                g.embedding(v[0], &[4, 0, 4, 2], &[2, 2])
            }),
            ("cross_entropy", vec![vec![4, 6]], |g, v| {
                g.cross_entropy(v[0], &[0, 5, 2, 2])
            }),
            ("split_heads", vec![vec![2, 3, 8]], |g, v| g.split_heads(v[0], 4, 1, 2)),
            ("merge_heads", vec![vec![4, 3, 2]], |g, v| g.merge_heads(v[0], 2)),
            ("repeat_interleave", vec![vec![3]], |g, v| g.repeat_interleave(v[0], 4)),
            ("fan_out", vec![vec![3, 4]], |g, v| {
                let a = g.tanh(v[0])?;
                let b = g.mul(v[0], a)?;
                g.add(b, v[0])
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn analytic_gradients_match_finite_differences(seed in 0u64..1_000_000) {
            for (name, shapes, build) in cases() {
                let inputs: Vec<DenseTensor> =
                    shapes.iter().enumerate().map(|(i, s)| rand(s, seed.wrapping_mul(31).wrapping_add(i as u64))).collect();
                let err = max_error(&inputs, build, seed);
                prop_assert!(err <= TOL, "{} seed {}: {}", name, seed, err);
            }
        }
    }

    #[test]
    fn matmul_sum_gradient_example() {
        let build: Build = |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        };
        let inputs = [rand(&[3, 4], 1), rand(&[4, 2], 2)];
        assert!(max_error(&inputs, build, 3) <= TOL);
    }
}
