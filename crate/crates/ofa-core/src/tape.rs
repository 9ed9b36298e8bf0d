//! Reverse-mode differentiable tensor engine.
//!
//! A [`Tape`] executes operations eagerly and records them in order; calling
//! [`Tape::backward`] replays the record in exact reverse order, accumulating
//! vector-Jacobian products into every reachable node. The op set is exactly
//! what the attention model and its losses need — no broadcasting beyond the
//! listed kernels, no views, 64-bit floats throughout.
//!
//! Distinct tapes are independent; a tape is single-threaded by construction.

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Slot of a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

enum Op {
    /// out = a · b
    MatMul { a: ValueId, b: ValueId, out: ValueId },
    /// out = a · bᵀ
    MatMulBT { a: ValueId, b: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Scale { a: ValueId, c: f64, out: ValueId },
    /// out[i,j] = m[i,j] + bias[j]
    AddRowBias { m: ValueId, bias: ValueId, out: ValueId },
    Gelu { a: ValueId, out: ValueId },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        out: ValueId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    // The mask is not cached: masked outputs are exactly 0, which already
    // kills their gradient in the softmax VJP.
    RowSoftmax { x: ValueId, out: ValueId },
    Frobenius { a: ValueId, b: ValueId, out: ValueId },
    BceWithLogits { logits: ValueId, targets: Vec<f64>, out: ValueId },
    MaskedMse { pred: ValueId, target: Vec<f64>, mask: Vec<f64>, out: ValueId },
    SumAll { a: ValueId, out: ValueId },
    ConcatRows { parts: Vec<ValueId>, out: ValueId },
    ConcatCols { parts: Vec<ValueId>, out: ValueId },
    SliceRows { a: ValueId, start: usize, out: ValueId },
    SliceCols { a: ValueId, start: usize, out: ValueId },
    /// Rows with `zeroed[i]` true are set to zero.
    ZeroRows { a: ValueId, zeroed: Vec<bool>, out: ValueId },
    /// out[i] = table[indices[i]]
    GatherRows { table: ValueId, indices: Vec<usize>, out: ValueId },
    /// out = n copies of the row vector v
    BroadcastRow { v: ValueId, out: ValueId },
    /// out row i = token if masked[i], else x row i (exact copies)
    RowBlend { x: ValueId, token: ValueId, masked: Vec<bool>, out: ValueId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::MatMulBT { .. } => "matmul_bt",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RowSoftmax { .. } => "row_softmax",
            Op::Frobenius { .. } => "frobenius_distance",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::MaskedMse { .. } => "masked_mse",
            Op::SumAll { .. } => "sum_all",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ZeroRows { .. } => "zero_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::BroadcastRow { .. } => "broadcast_row",
            Op::RowBlend { .. } => "row_blend",
        }
    }

    fn out(&self) -> ValueId {
        match self {
            Op::MatMul { out, .. }
            | Op::MatMulBT { out, .. }
            | Op::Add { out, .. }
            | Op::Scale { out, .. }
            | Op::AddRowBias { out, .. }
            | Op::Gelu { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::RowSoftmax { out, .. }
            | Op::Frobenius { out, .. }
            | Op::BceWithLogits { out, .. }
            | Op::MaskedMse { out, .. }
            | Op::SumAll { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::SliceRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ZeroRows { out, .. }
            | Op::GatherRows { out, .. }
            | Op::BroadcastRow { out, .. }
            | Op::RowBlend { out, .. } => *out,
        }
    }
}

/// Exact GELU, erf form.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// out += a · b, row-major, a: m×k, b: k×n.
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out += a · bᵀ, a: m×k, b: n×k.
fn matmul_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            orow[j] += acc;
        }
    }
}

// out += aᵀ · b, a: m×k, b: m×n, out: k×n.
fn matmul_at_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Row softmax over unmasked entries; all-masked rows come out all-zero.
/// Mask entries are "one = participates"; masked entries behave like −∞.
pub fn row_softmax_values(x: &[f64], mask: Option<&[f64]>, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let mr = mask.map(|m| &m[i * cols..(i + 1) * cols]);
        let live = |j: usize| mr.map_or(true, |m| m[j] != 0.0);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..cols {
            if live(j) && xr[j] > mx {
                mx = xr[j];
            }
        }
        if mx == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            if live(j) {
                let e = (xr[j] - mx).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Eagerly-executing tape of differentiable tensor operations.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, requires_grad });
        id
    }

    fn push_out(&mut self, value: Tensor, inputs: &[ValueId]) -> ValueId {
        let req = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, req)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Gradient accumulated at `id` after [`Tape::backward`]; zeros if the
    /// node is unreachable from the loss.
    pub fn grad(&self, id: ValueId) -> Tensor {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// First op in execution order whose output contains a NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.ops
            .iter()
            .enumerate()
            .find(|(_, op)| !self.nodes[op.out().0].value.is_finite())
            .map(|(i, op)| (i, op.name()))
    }

    // ----- operations -------------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, ta.data(), tb.data(), m, k, n);
        let out = self.push_out(Tensor::new(vec![m, n], data)?, &[a, b]);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// a · bᵀ with b given row-major as n×k.
    pub fn matmul_bt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut data = vec![0.0; m * n];
        matmul_bt_acc(&mut data, ta.data(), tb.data(), m, k, n);
        let out = self.push_out(Tensor::new(vec![m, n], data)?, &[a, b]);
        self.ops.push(Op::MatMulBT { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let out = self.push_out(Tensor::new(shape, data)?, &[a, b]);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| c * x).collect();
        let shape = self.value(a).shape().to_vec();
        let out = self.push_out(Tensor::new(shape, data).expect("scale shape"), &[a]);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    pub fn add_row_bias(&mut self, m: ValueId, bias: ValueId) -> Result<ValueId> {
        let (tm, tb) = (self.value(m), self.value(bias));
        if tm.rank() != 2 || tb.rank() != 1 || tb.shape()[0] != tm.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: tm.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (r, c) = (tm.rows(), tm.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(tm.data()[i * c + j] + tb.data()[j]);
            }
        }
        let out = self.push_out(Tensor::new(vec![r, c], data)?, &[m, bias]);
        self.ops.push(Op::AddRowBias { m, bias, out });
        Ok(out)
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let out = self.push_out(Tensor::new(shape, data).expect("gelu shape"), &[a]);
        self.ops.push(Op::Gelu { a, out });
        out
    }

    /// Per-row layer norm with learnable gain and bias, epsilon 1e-5.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tx.rank() != 2 || tg.rank() != 1 || tg.shape()[0] != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        check_same_shape("layer_norm", tg, tb)?;
        let (r, c) = (tx.rows(), tx.cols());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let out = self.push_out(Tensor::new(vec![r, c], data)?, &[x, gain, bias]);
        self.ops.push(Op::LayerNorm { x, gain, bias, out, xhat, inv_std });
        Ok(out)
    }

    /// Row-wise softmax; with a binary mask, masked entries behave like −∞
    /// (output 0) and all-masked rows come out all-zero.
    pub fn row_softmax(&mut self, x: ValueId, mask: Option<&Tensor>) -> Result<ValueId> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::contract(format!(
                "row_softmax requires rank 2, got {:?}",
                tx.shape()
            )));
        }
        if let Some(m) = mask {
            check_same_shape("row_softmax", tx, m)?;
        }
        let (r, c) = (tx.rows(), tx.cols());
        let data = row_softmax_values(tx.data(), mask.map(|m| m.data()), r, c);
        let out = self.push_out(Tensor::new(vec![r, c], data)?, &[x]);
        self.ops.push(Op::RowSoftmax { x, out });
        Ok(out)
    }

    /// sqrt(Σ (a−b)²); gradient at a == b is taken as 0.
    pub fn frobenius_distance(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        check_same_shape("frobenius_distance", self.value(a), self.value(b))?;
        let sum_sq: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = self.push_out(Tensor::scalar(sum_sq.sqrt()), &[a, b]);
        self.ops.push(Op::Frobenius { a, b, out });
        Ok(out)
    }

    /// Mean over classes of the numerically stable binary cross entropy with
    /// logits. Targets are constants and must be 0/1.
    pub fn bce_with_logits(&mut self, logits: ValueId, targets: &Tensor) -> Result<ValueId> {
        check_same_shape("bce_with_logits", self.value(logits), targets)?;
        if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::contract("bce_with_logits targets must be 0 or 1"));
        }
        let n = targets.numel() as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = self.push_out(Tensor::scalar(total / n), &[logits]);
        self.ops.push(Op::BceWithLogits { logits, targets: targets.data().to_vec(), out });
        Ok(out)
    }

    /// Mean squared error over entries where `mask` is 1. Target and mask are
    /// constants; the mask must select at least one entry.
    pub fn masked_mse(&mut self, pred: ValueId, target: &Tensor, mask: &Tensor) -> Result<ValueId> {
        check_same_shape("masked_mse", self.value(pred), target)?;
        check_same_shape("masked_mse", self.value(pred), mask)?;
        let m_count: f64 = mask.data().iter().sum();
        if m_count < 1.0 {
            return Err(Error::contract("masked_mse: mask selects no entries"));
        }
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((&p, &t), &m)| m * (p - t) * (p - t))
            .sum();
        let out = self.push_out(Tensor::scalar(total / m_count), &[pred]);
        self.ops.push(Op::MaskedMse {
            pred,
            target: target.data().to_vec(),
            mask: mask.data().to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.value(a).data().iter().sum();
        let out = self.push_out(Tensor::scalar(s), &[a]);
        self.ops.push(Op::SumAll { a, out });
        out
    }

    /// Stacks parts vertically. Rank-1 parts count as single rows.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        assert!(!parts.is_empty());
        let cols = self.part_cols(parts[0]);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if self.part_cols(p) != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += if t.rank() == 1 { 1 } else { t.rows() };
            data.extend_from_slice(t.data());
        }
        let out = self.push_out(Tensor::new(vec![rows, cols], data)?, parts);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out });
        Ok(out)
    }

    fn part_cols(&self, id: ValueId) -> usize {
        let t = self.value(id);
        if t.rank() == 1 {
            t.shape()[0]
        } else {
            t.cols()
        }
    }

    /// Concatenates rank-2 parts side by side.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                data[i * total_cols + col_off..i * total_cols + col_off + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            col_off += c;
        }
        let out = self.push_out(Tensor::new(vec![rows, total_cols], data)?, parts);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        Ok(out)
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let t = self.value(a);
        if t.rank() != 2 || start + len > t.rows() {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {start}+{len}) out of range for {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let out = self.push_out(Tensor::new(vec![len, c], data)?, &[a]);
        self.ops.push(Op::SliceRows { a, start, out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let t = self.value(a);
        if t.rank() != 2 || start + len > t.cols() {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {start}+{len}) out of range for {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = self.push_out(Tensor::new(vec![r, len], data)?, &[a]);
        self.ops.push(Op::SliceCols { a, start, out });
        Ok(out)
    }

    /// Zeroes the rows flagged in `zeroed`.
    pub fn zero_rows(&mut self, a: ValueId, zeroed: &[bool]) -> Result<ValueId> {
        let t = self.value(a);
        if t.rank() != 2 || zeroed.len() != t.rows() {
            return Err(Error::contract(format!(
                "zero_rows flags ({}) must match rows of {:?}",
                zeroed.len(),
                t.shape()
            )));
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        for (i, &z) in zeroed.iter().enumerate() {
            if z {
                data[i * c..(i + 1) * c].fill(0.0);
            }
        }
        let shape = t.shape().to_vec();
        let out = self.push_out(Tensor::new(shape, data)?, &[a]);
        self.ops.push(Op::ZeroRows { a, zeroed: zeroed.to_vec(), out });
        Ok(out)
    }

    /// Row lookup: out[i] = table[indices[i]]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::contract("gather_rows: table must be rank 2".to_string()));
        }
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("gather_rows: index {bad} >= {r}")));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = self.push_out(Tensor::new(vec![indices.len(), c], data)?, &[table]);
        self.ops.push(Op::GatherRows { table, indices: indices.to_vec(), out });
        Ok(out)
    }

    /// n stacked copies of the rank-1 vector v.
    pub fn broadcast_row(&mut self, v: ValueId, n: usize) -> Result<ValueId> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(Error::contract("broadcast_row: v must be rank 1".to_string()));
        }
        let c = t.shape()[0];
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let out = self.push_out(Tensor::new(vec![n, c], data)?, &[v]);
        self.ops.push(Op::BroadcastRow { v, out });
        Ok(out)
    }

    /// Replaces the flagged rows of x with the token vector (bit-exact row
    /// copies, no arithmetic).
    pub fn row_blend(&mut self, x: ValueId, token: ValueId, masked: &[bool]) -> Result<ValueId> {
        let (tx, tt) = (self.value(x), self.value(token));
        if tx.rank() != 2 || tt.rank() != 1 || tt.shape()[0] != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "row_blend",
                lhs: tx.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        if masked.len() != tx.rows() {
            return Err(Error::contract("row_blend: flag length must match rows".to_string()));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, &m) in masked.iter().enumerate() {
            if m {
                data[i * c..(i + 1) * c].copy_from_slice(tt.data());
            }
        }
        let shape = tx.shape().to_vec();
        let out = self.push_out(Tensor::new(shape, data)?, &[x, token]);
        self.ops.push(Op::RowBlend { x, token, masked: masked.to_vec(), out });
        Ok(out)
    }

    // ----- backward ----------------------------------------------------

    /// Reverse-mode accumulation from a scalar loss. Resets all gradients
    /// first, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for op_idx in (0..self.ops.len()).rev() {
            // Ops are never removed, so a raw pointer swap-out keeps the
            // borrow checker happy without cloning cached buffers.
            let op = std::mem::replace(&mut self.ops[op_idx], Op::SumAll {
                a: ValueId(0),
                out: ValueId(0),
            });
            self.backward_op(&op);
            self.ops[op_idx] = op;
        }
        Ok(())
    }

    fn take_out_grad(&self, out: ValueId) -> Option<Vec<f64>> {
        self.nodes[out.0].grad.clone()
    }

    fn wants(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn acc(&mut self, id: ValueId, contribution: impl FnOnce(&mut [f64])) {
        let numel = self.nodes[id.0].value.numel();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        contribution(g);
    }

    fn backward_op(&mut self, op: &Op) {
        let Some(go) = self.take_out_grad(op.out()) else {
            return;
        };
        match op {
            Op::MatMul { a, b, out: _ } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let bdata = self.nodes[b.0].value.data().to_vec();
                    self.acc(*a, |g| matmul_bt_acc(g, &go, &bdata, m, n, k));
                }
                if self.wants(*b) {
                    let adata = self.nodes[a.0].value.data().to_vec();
                    self.acc(*b, |g| matmul_at_acc(g, &adata, &go, m, k, n));
                }
            }
            Op::MatMulBT { a, b, out: _ } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.wants(*a) {
                    // dA = G · B, G: m×n, B: n×k
                    let bdata = self.nodes[b.0].value.data().to_vec();
                    self.acc(*a, |g| matmul_acc(g, &go, &bdata, m, n, k));
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A, G: m×n, A: m×k
                    let adata = self.nodes[a.0].value.data().to_vec();
                    self.acc(*b, |g| matmul_at_acc(g, &go, &adata, m, n, k));
                }
            }
            Op::Add { a, b, out: _ } => {
                if self.wants(*a) {
                    self.acc(*a, |g| {
                        for (gi, &goi) in g.iter_mut().zip(&go) {
                            *gi += goi;
                        }
                    });
                }
                if self.wants(*b) {
                    self.acc(*b, |g| {
                        for (gi, &goi) in g.iter_mut().zip(&go) {
                            *gi += goi;
                        }
                    });
                }
            }
            Op::Scale { a, c, out: _ } => {
                if self.wants(*a) {
                    let c = *c;
                    self.acc(*a, |g| {
                        for (gi, &goi) in g.iter_mut().zip(&go) {
                            *gi += c * goi;
                        }
                    });
                }
            }
            Op::AddRowBias { m, bias, out: _ } => {
                let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                if self.wants(*m) {
                    self.acc(*m, |g| {
                        for (gi, &goi) in g.iter_mut().zip(&go) {
                            *gi += goi;
                        }
                    });
                }
                if self.wants(*bias) {
                    self.acc(*bias, |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += go[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Gelu { a, out: _ } => {
                if self.wants(*a) {
                    let x = self.nodes[a.0].value.data().to_vec();
                    self.acc(*a, |g| {
                        for (j, (gi, &goi)) in g.iter_mut().zip(&go).enumerate() {
                            *gi += goi * gelu_grad_scalar(x[j]);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, out: _, xhat, inv_std } => {
                let c = self.nodes[x.0].value.cols();
                let r = self.nodes[x.0].value.rows();
                let gain_data = self.nodes[gain.0].value.data().to_vec();
                if self.wants(*x) {
                    self.acc(*x, |g| {
                        for i in 0..r {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..c {
                                let dxh = go[i * c + j] * gain_data[j];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat[i * c + j];
                            }
                            let nf = c as f64;
                            for j in 0..c {
                                let dxh = go[i * c + j] * gain_data[j];
                                g[i * c + j] += inv_std[i]
                                    * (dxh - sum_dxhat / nf - xhat[i * c + j] * sum_dxhat_xhat / nf);
                            }
                        }
                    });
                }
                if self.wants(*gain) {
                    self.acc(*gain, |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += go[i * c + j] * xhat[i * c + j];
                            }
                        }
                    });
                }
                if self.wants(*bias) {
                    self.acc(*bias, |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[j] += go[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::RowSoftmax { x, out } => {
                if self.wants(*x) {
                    let y = self.nodes[out.0].value.data().to_vec();
                    let (r, c) = (
                        self.nodes[x.0].value.rows(),
                        self.nodes[x.0].value.cols(),
                    );
                    self.acc(*x, |g| {
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &go[i * c..(i + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                g[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::Frobenius { a, b, out } => {
                let dist = self.nodes[out.0].value.item();
                if dist == 0.0 {
                    return; // subgradient 0 at coincident inputs
                }
                let scale = go[0] / dist;
                let diff: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(x, y)| x - y)
                    .collect();
                if self.wants(*a) {
                    self.acc(*a, |g| {
                        for (gi, &d) in g.iter_mut().zip(&diff) {
                            *gi += scale * d;
                        }
                    });
                }
                if self.wants(*b) {
                    self.acc(*b, |g| {
                        for (gi, &d) in g.iter_mut().zip(&diff) {
                            *gi -= scale * d;
                        }
                    });
                }
            }
            Op::BceWithLogits { logits, targets, out: _ } => {
                if self.wants(*logits) {
                    let z = self.nodes[logits.0].value.data().to_vec();
                    let n = targets.len() as f64;
                    let targets = targets.clone();
                    self.acc(*logits, |g| {
                        for j in 0..targets.len() {
                            g[j] += go[0] * (sigmoid(z[j]) - targets[j]) / n;
                        }
                    });
                }
            }
            Op::MaskedMse { pred, target, mask, out: _ } => {
                if self.wants(*pred) {
                    let p = self.nodes[pred.0].value.data().to_vec();
                    let m_count: f64 = mask.iter().sum();
                    let target = target.clone();
                    let mask = mask.clone();
                    self.acc(*pred, |g| {
                        for j in 0..target.len() {
                            g[j] += go[0] * 2.0 * mask[j] * (p[j] - target[j]) / m_count;
                        }
                    });
                }
            }
            Op::SumAll { a, out: _ } => {
                if self.wants(*a) {
                    self.acc(*a, |g| {
                        for gi in g.iter_mut() {
                            *gi += go[0];
                        }
                    });
                }
            }
            Op::ConcatRows { parts, out: _ } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.nodes[p.0].value.numel();
                    if self.wants(p) {
                        let slice = go[offset..offset + numel].to_vec();
                        self.acc(p, |g| {
                            for (gi, &goi) in g.iter_mut().zip(&slice) {
                                *gi += goi;
                            }
                        });
                    }
                    offset += numel;
                }
            }
            Op::ConcatCols { parts, out } => {
                let rows = self.nodes[out.0].value.rows();
                let total_cols = self.nodes[out.0].value.cols();
                let mut col_off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if self.wants(p) {
                        let mut slice = vec![0.0; rows * c];
                        for i in 0..rows {
                            slice[i * c..(i + 1) * c].copy_from_slice(
                                &go[i * total_cols + col_off..i * total_cols + col_off + c],
                            );
                        }
                        self.acc(p, |g| {
                            for (gi, &goi) in g.iter_mut().zip(&slice) {
                                *gi += goi;
                            }
                        });
                    }
                    col_off += c;
                }
            }
            Op::SliceRows { a, start, out } => {
                if self.wants(*a) {
                    let c = self.nodes[a.0].value.cols();
                    let len = self.nodes[out.0].value.rows();
                    let start = *start;
                    self.acc(*a, |g| {
                        for (gi, &goi) in g[start * c..(start + len) * c].iter_mut().zip(&go) {
                            *gi += goi;
                        }
                    });
                }
            }
            Op::SliceCols { a, start, out } => {
                if self.wants(*a) {
                    let (r, c) = (
                        self.nodes[a.0].value.rows(),
                        self.nodes[a.0].value.cols(),
                    );
                    let len = self.nodes[out.0].value.cols();
                    let start = *start;
                    self.acc(*a, |g| {
                        for i in 0..r {
                            for j in 0..len {
                                g[i * c + start + j] += go[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::ZeroRows { a, zeroed, out: _ } => {
                if self.wants(*a) {
                    let c = self.nodes[a.0].value.cols();
                    let zeroed = zeroed.clone();
                    self.acc(*a, |g| {
                        for (i, &z) in zeroed.iter().enumerate() {
                            if !z {
                                for j in 0..c {
                                    g[i * c + j] += go[i * c + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::GatherRows { table, indices, out: _ } => {
                if self.wants(*table) {
                    let c = self.nodes[table.0].value.cols();
                    let indices = indices.clone();
                    self.acc(*table, |g| {
                        for (row, &idx) in indices.iter().enumerate() {
                            for j in 0..c {
                                g[idx * c + j] += go[row * c + j];
                            }
                        }
                    });
                }
            }
            Op::BroadcastRow { v, out } => {
                if self.wants(*v) {
                    let c = self.nodes[v.0].value.shape()[0];
                    let n = self.nodes[out.0].value.rows();
                    self.acc(*v, |g| {
                        for i in 0..n {
                            for j in 0..c {
                                g[j] += go[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::RowBlend { x, token, masked, out: _ } => {
                let c = self.nodes[x.0].value.cols();
                if self.wants(*x) {
                    let masked = masked.clone();
                    self.acc(*x, |g| {
                        for (i, &m) in masked.iter().enumerate() {
                            if !m {
                                for j in 0..c {
                                    g[i * c + j] += go[i * c + j];
                                }
                            }
                        }
                    });
                }
                if self.wants(*token) {
                    let masked = masked.clone();
                    self.acc(*token, |g| {
                        for (i, &m) in masked.iter().enumerate() {
                            if m {
                                for j in 0..c {
                                    g[j] += go[i * c + j];
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}
