//! Define-by-run reverse-mode differentiation over a fixed op set.
//!
//! Ops execute eagerly and record themselves on the graph; `backward` walks
//! the records in reverse insertion order (a valid reverse topological order
//! by construction) exactly once. Matrix ops are rank-2, biases rank-1,
//! convolution weights rank-3.

use crate::{Error, Result};

use super::kernels;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    /// [T, D] + [D] broadcast over rows.
    AddRow,
    Matmul,
    Transpose,
    /// x [T, Cin], w [Cout, Cin, K], b [Cout]; valid, strided.
    Conv1d { kernel: usize, stride: usize },
    /// x [T, C], w [C, K], b [C]; valid, stride 1.
    DepthwiseConv1d { kernel: usize },
    PadRows { before: usize, after: usize },
    /// Non-overlapping mean pooling over rows; window must divide T.
    AvgPoolRows { window: usize },
    /// x [T, D], gain [D], bias [D]; normalizes each row.
    LayerNorm { eps: f64 },
    Sigmoid,
    Swish,
    /// [T, 2D] -> [T, D]: left half gated by sigmoid of right half.
    Glu,
    Softmax,
    LogSoftmax,
    Ln,
    Exp,
    Sqrt,
    Sum,
    Mean,
    /// [T, D] -> [T]: sum across the row.
    RowSums,
    /// [T, D] -> [D]: mean down each column.
    ColMeans,
    SliceCols { from: usize, to: usize },
    ConcatCols,
    GatherRows(Vec<usize>),
    /// (x [T, D], row [D]): copy of x with the listed rows replaced by `row`.
    ReplaceRows(Vec<usize>),
    StopGrad,
    /// Row-wise one-hot at argmax (ties -> lowest id). Not differentiable.
    HardOneHot,
    /// Mean smooth-L1 between two same-shape tensors -> scalar.
    SmoothL1 { beta: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by node id; only leaves retain entries after backward.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable or input leaf; gradients are kept for leaves built from a
    /// tensor with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs_grad = value.requires_grad();
        self.push(Op::Leaf, vec![], value, needs_grad)
    }

    /// Leaf that never receives gradient (inputs, masks, positional tables).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::State(format!("node {} not on this graph", id.0)))
        }
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = match op {
            Op::Add => va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
            Op::Sub => va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect(),
            Op::Mul => va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
            Op::Div => va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect(),
            _ => unreachable!(),
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(op, vec![a, b], value, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())?;
        let needs = self.any_needs_grad(&[a]);
        Ok(self.push(Op::Scale(c), vec![a], value, needs))
    }

    fn unary_map(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        let needs = self.any_needs_grad(&[a]);
        Ok(self.push(op, vec![a], value, needs))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary_map(Op::Sigmoid, a, sigmoid)
    }

    pub fn swish(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary_map(Op::Swish, a, |x| x * sigmoid(x))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary_map(Op::Ln, a, f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary_map(Op::Exp, a, f64::exp)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary_map(Op::Sqrt, a, f64::sqrt)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(row)?;
        let vx = &self.nodes[x.0].value;
        let vr = &self.nodes[row.0].value;
        let (t, d) = require_mat(vx)?;
        if vr.rank() != 1 || vr.len() != d {
            return Err(Error::Shape(format!(
                "add_row wants [{d}] bias for [{t}, {d}] input, got {:?}",
                vr.shape()
            )));
        }
        let mut data = vx.data().to_vec();
        for r in 0..t {
            for c in 0..d {
                data[r * d + c] += vr.data()[c];
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        let needs = self.any_needs_grad(&[x, row]);
        Ok(self.push(Op::AddRow, vec![x, row], value, needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (m, k) = require_mat(va)?;
        let (k2, n) = require_mat(vb)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] @ [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::Matmul, vec![a, b], value, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = &self.nodes[a.0].value;
        let (r, c) = require_mat(va)?;
        let data = transpose_data(va.data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        let needs = self.any_needs_grad(&[a]);
        Ok(self.push(Op::Transpose, vec![a], value, needs))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[b.0].value;
        let (t_in, c_in) = require_mat(vx)?;
        let [c_out, w_cin, kernel] = match vw.shape() {
            [a, b, c] => [*a, *b, *c],
            other => return Err(Error::Shape(format!("conv1d weight rank-3, got {other:?}"))),
        };
        if w_cin != c_in || vb.shape() != [c_out] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv1d x[{t_in},{c_in}] w{:?} b{:?} stride {stride}",
                vw.shape(),
                vb.shape()
            )));
        }
        if t_in < kernel {
            return Err(Error::InputTooShort);
        }
        let t_out = (t_in - kernel) / stride + 1;
        let mut out = vec![0.0; t_out * c_out];
        kernels::conv1d(
            vx.data(),
            vw.data(),
            vb.data(),
            t_in,
            c_in,
            c_out,
            kernel,
            stride,
            &mut out,
        );
        let value = Tensor::new(vec![t_out, c_out], out)?;
        let needs = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(Op::Conv1d { kernel, stride }, vec![x, w, b], value, needs))
    }

    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[b.0].value;
        let (t_in, c) = require_mat(vx)?;
        let (w_c, kernel) = require_mat(vw)?;
        if w_c != c || vb.shape() != [c] {
            return Err(Error::Shape(format!(
                "depthwise conv x[{t_in},{c}] w{:?} b{:?}",
                vw.shape(),
                vb.shape()
            )));
        }
        if t_in < kernel {
            return Err(Error::InputTooShort);
        }
        let t_out = t_in - kernel + 1;
        let mut out = vec![0.0; t_out * c];
        kernels::depthwise_conv1d(vx.data(), vw.data(), vb.data(), t_in, c, kernel, &mut out);
        let value = Tensor::new(vec![t_out, c], out)?;
        let needs = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(Op::DepthwiseConv1d { kernel }, vec![x, w, b], value, needs))
    }

    pub fn pad_rows(&mut self, x: NodeId, before: usize, after: usize) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        let mut data = vec![0.0; (before + t + after) * d];
        data[before * d..(before + t) * d].copy_from_slice(vx.data());
        let value = Tensor::new(vec![before + t + after, d], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::PadRows { before, after }, vec![x], value, needs))
    }

    pub fn avg_pool_rows(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        if window == 0 || t % window != 0 {
            return Err(Error::Shape(format!(
                "avg_pool window {window} must divide {t} rows (pad first)"
            )));
        }
        let t_out = t / window;
        let mut data = vec![0.0; t_out * d];
        for to in 0..t_out {
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..window {
                    acc += vx.data()[(to * window + j) * d + c];
                }
                data[to * d + c] = acc / window as f64;
            }
        }
        let value = Tensor::new(vec![t_out, d], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::AvgPoolRows { window }, vec![x], value, needs))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gain.0].value;
        let vb = &self.nodes[bias.0].value;
        let (t, d) = require_mat(vx)?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            let row = &vx.data()[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_std;
                data[r * d + c] = xhat * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        let needs = self.any_needs_grad(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], value, needs))
    }

    pub fn glu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d2) = require_mat(vx)?;
        if d2 % 2 != 0 {
            return Err(Error::Shape(format!("glu wants even width, got {d2}")));
        }
        let d = d2 / 2;
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..d {
                let a = vx.data()[r * d2 + c];
                let b = vx.data()[r * d2 + d + c];
                data[r * d + c] = a * sigmoid(b);
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Glu, vec![x], value, needs))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            let row = &vx.data()[r * d..(r + 1) * d];
            let lse = kernels::logsumexp(row);
            for c in 0..d {
                data[r * d + c] = (row[c] - lse).exp();
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Softmax, vec![x], value, needs))
    }

    /// Row-wise log softmax. Rejects non-finite inputs.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        if !vx.is_finite() {
            return Err(Error::InvalidInput(
                "log_softmax received non-finite logits".into(),
            ));
        }
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            let row = &vx.data()[r * d..(r + 1) * d];
            let lse = kernels::logsumexp(row);
            for c in 0..d {
                data[r * d + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::LogSoftmax, vec![x], value, needs))
    }

    // ── reductions and reshapes ─────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let value = Tensor::scalar(vx.data().iter().sum());
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Sum, vec![x], value, needs))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let value = Tensor::scalar(vx.data().iter().sum::<f64>() / vx.len() as f64);
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Mean, vec![x], value, needs))
    }

    pub fn row_sums(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        let data = (0..t)
            .map(|r| vx.data()[r * d..(r + 1) * d].iter().sum())
            .collect();
        let value = Tensor::new(vec![t], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::RowSums, vec![x], value, needs))
    }

    pub fn col_means(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        let mut data = vec![0.0; d];
        for c in 0..d {
            let mut acc = 0.0;
            for r in 0..t {
                acc += vx.data()[r * d + c];
            }
            data[c] = acc / t as f64;
        }
        let value = Tensor::new(vec![d], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::ColMeans, vec![x], value, needs))
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        if from >= to || to > d {
            return Err(Error::Shape(format!("slice_cols {from}..{to} of width {d}")));
        }
        let w = to - from;
        let mut data = vec![0.0; t * w];
        for r in 0..t {
            data[r * w..(r + 1) * w].copy_from_slice(&vx.data()[r * d + from..r * d + to]);
        }
        let value = Tensor::new(vec![t, w], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::SliceCols { from, to }, vec![x], value, needs))
    }

    /// Concatenate along the last dim; rank-1 inputs count as single columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of nothing".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let t = self.nodes[parts[0].0].value.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.dims2()?;
            if r != t {
                return Err(Error::Shape("concat_cols row count mismatch".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; t * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.0].value;
            for r in 0..t {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![t, total], data)?;
        let needs = self.any_needs_grad(parts);
        Ok(self.push(Op::ConcatCols, parts.to_vec(), value, needs))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        if indices.is_empty() {
            return Err(Error::InvalidInput("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
            return Err(Error::Range(format!("gather_rows index {bad} >= {t}")));
        }
        let mut data = vec![0.0; indices.len() * d];
        for (r, &i) in indices.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&vx.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::GatherRows(indices.to_vec()), vec![x], value, needs))
    }

    pub fn replace_rows(&mut self, x: NodeId, row: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        self.check(row)?;
        let vx = &self.nodes[x.0].value;
        let vr = &self.nodes[row.0].value;
        let (t, d) = require_mat(vx)?;
        if vr.rank() != 1 || vr.len() != d {
            return Err(Error::Shape(format!(
                "replace_rows row must be [{d}], got {:?}",
                vr.shape()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
            return Err(Error::Range(format!("replace_rows index {bad} >= {t}")));
        }
        let mut data = vx.data().to_vec();
        for &i in indices {
            data[i * d..(i + 1) * d].copy_from_slice(vr.data());
        }
        let value = Tensor::new(vec![t, d], data)?;
        let needs = self.any_needs_grad(&[x, row]);
        Ok(self.push(Op::ReplaceRows(indices.to_vec()), vec![x, row], value, needs))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(Op::StopGrad, vec![x], value, false))
    }

    /// Row-wise one-hot at the argmax (ties -> lowest id). Zero backward.
    pub fn hard_one_hot(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let vx = &self.nodes[x.0].value;
        let (t, d) = require_mat(vx)?;
        let mut data = vec![0.0; t * d];
        for r in 0..t {
            let row = &vx.data()[r * d..(r + 1) * d];
            data[r * d + argmax(row)] = 1.0;
        }
        let value = Tensor::new(vec![t, d], data)?;
        Ok(self.push(Op::HardOneHot, vec![x], value, false))
    }

    /// Mean smooth-L1 (quadratic inside beta, linear outside) -> scalar.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId, beta: f64) -> Result<NodeId> {
        self.check(pred)?;
        self.check(target)?;
        if beta <= 0.0 {
            return Err(Error::InvalidInput(format!("smooth_l1 beta {beta} <= 0")));
        }
        let vp = &self.nodes[pred.0].value;
        let vt = &self.nodes[target.0].value;
        if vp.shape() != vt.shape() {
            return Err(Error::Shape(format!(
                "smooth_l1 on {:?} vs {:?}",
                vp.shape(),
                vt.shape()
            )));
        }
        let n = vp.len() as f64;
        let acc: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| {
                let r = (p - t).abs();
                if r < beta {
                    0.5 * r * r / beta
                } else {
                    r - 0.5 * beta
                }
            })
            .sum();
        let value = Tensor::scalar(acc / n);
        let needs = self.any_needs_grad(&[pred, target]);
        Ok(self.push(Op::SmoothL1 { beta }, vec![pred, target], value, needs))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Backward from a scalar loss node with seed gradient 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let v = &self.nodes[loss.0].value;
        if v.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Backward from an arbitrary node with an externally supplied gradient,
    /// e.g. the CTC gradient with respect to the lattice node.
    pub fn backward_seeded(&self, node: NodeId, seed: Tensor) -> Result<Gradients> {
        self.check(node)?;
        if seed.shape() != self.nodes[node.0].value.shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} vs node shape {:?}",
                seed.shape(),
                self.nodes[node.0].value.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[node.0] = Some(seed);
        for id in (0..=node.0).rev() {
            if !self.nodes[id].needs_grad {
                slots[id] = None;
                continue;
            }
            if slots[id].is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = slots[id].take().expect("checked above");
            let (earlier, _) = slots.split_at_mut(id);
            self.distribute(id, &g, earlier)?;
        }
        Ok(Gradients { slots })
    }

    /// Push the node's output gradient onto its inputs.
    fn distribute(&self, id: usize, g: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let input_val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let wants = |i: usize| self.nodes[node.inputs[i].0].needs_grad;
        let mut acc = |i: usize, delta: Tensor| {
            let slot = &mut slots[node.inputs[i].0];
            match slot {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if wants(0) {
                    acc(0, g.clone());
                }
                if wants(1) {
                    acc(1, g.clone());
                }
            }
            Op::Sub => {
                if wants(0) {
                    acc(0, g.clone());
                }
                if wants(1) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().for_each(|v| *v = -*v);
                    acc(1, d);
                }
            }
            Op::Mul => {
                let (va, vb) = (input_val(0), input_val(1));
                if wants(0) {
                    let data = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    acc(0, Tensor::new(va.shape().to_vec(), data)?);
                }
                if wants(1) {
                    let data = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    acc(1, Tensor::new(vb.shape().to_vec(), data)?);
                }
            }
            Op::Div => {
                let (va, vb) = (input_val(0), input_val(1));
                if wants(0) {
                    let data = g.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
                    acc(0, Tensor::new(va.shape().to_vec(), data)?);
                }
                if wants(1) {
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(gv, (a, b))| -gv * a / (b * b))
                        .collect();
                    acc(1, Tensor::new(vb.shape().to_vec(), data)?);
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    let data = g.data().iter().map(|x| x * c).collect();
                    acc(0, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::AddRow => {
                let (t, d) = require_mat(input_val(0))?;
                if wants(0) {
                    acc(0, g.clone());
                }
                if wants(1) {
                    let mut data = vec![0.0; d];
                    for r in 0..t {
                        for c in 0..d {
                            data[c] += g.data()[r * d + c];
                        }
                    }
                    acc(1, Tensor::new(vec![d], data)?);
                }
            }
            Op::Matmul => {
                let (va, vb) = (input_val(0), input_val(1));
                let (m, k) = require_mat(va)?;
                let (_, n) = require_mat(vb)?;
                if wants(0) {
                    // ga = g @ b^T
                    let bt = transpose_data(vb.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g.data(), &bt, m, n, k, &mut da);
                    acc(0, Tensor::new(vec![m, k], da)?);
                }
                if wants(1) {
                    // gb = a^T @ g
                    let at = transpose_data(va.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&at, g.data(), k, m, n, &mut db);
                    acc(1, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose => {
                if wants(0) {
                    let (r, c) = require_mat(&node.value)?;
                    let data = transpose_data(g.data(), r, c);
                    acc(0, Tensor::new(vec![c, r], data)?);
                }
            }
            Op::Conv1d { kernel, stride } => {
                let (t_in, c_in) = require_mat(input_val(0))?;
                let c_out = input_val(2).len();
                let t_out = node.value.shape()[0];
                let xv = input_val(0).data();
                let wv = input_val(1).data();
                if wants(0) {
                    let mut dx = vec![0.0; t_in * c_in];
                    for t in 0..t_out {
                        for o in 0..c_out {
                            let gv = g.data()[t * c_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                for kk in 0..*kernel {
                                    dx[(t * stride + kk) * c_in + c] +=
                                        gv * wv[o * c_in * kernel + c * kernel + kk];
                                }
                            }
                        }
                    }
                    acc(0, Tensor::new(vec![t_in, c_in], dx)?);
                }
                if wants(1) {
                    let mut dw = vec![0.0; c_out * c_in * kernel];
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for kk in 0..*kernel {
                                let mut s = 0.0;
                                for t in 0..t_out {
                                    s += g.data()[t * c_out + o] * xv[(t * stride + kk) * c_in + c];
                                }
                                dw[o * c_in * kernel + c * kernel + kk] = s;
                            }
                        }
                    }
                    acc(1, Tensor::new(vec![c_out, c_in, *kernel], dw)?);
                }
                if wants(2) {
                    let mut db = vec![0.0; c_out];
                    for o in 0..c_out {
                        for t in 0..t_out {
                            db[o] += g.data()[t * c_out + o];
                        }
                    }
                    acc(2, Tensor::new(vec![c_out], db)?);
                }
            }
            Op::DepthwiseConv1d { kernel } => {
                let (t_in, c) = require_mat(input_val(0))?;
                let t_out = node.value.shape()[0];
                let xv = input_val(0).data();
                let wv = input_val(1).data();
                if wants(0) {
                    let mut dx = vec![0.0; t_in * c];
                    for t in 0..t_out {
                        for ch in 0..c {
                            let gv = g.data()[t * c + ch];
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..*kernel {
                                dx[(t + kk) * c + ch] += gv * wv[ch * kernel + kk];
                            }
                        }
                    }
                    acc(0, Tensor::new(vec![t_in, c], dx)?);
                }
                if wants(1) {
                    let mut dw = vec![0.0; c * kernel];
                    for ch in 0..c {
                        for kk in 0..*kernel {
                            let mut s = 0.0;
                            for t in 0..t_out {
                                s += g.data()[t * c + ch] * xv[(t + kk) * c + ch];
                            }
                            dw[ch * kernel + kk] = s;
                        }
                    }
                    acc(1, Tensor::new(vec![c, *kernel], dw)?);
                }
                if wants(2) {
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        for t in 0..t_out {
                            db[ch] += g.data()[t * c + ch];
                        }
                    }
                    acc(2, Tensor::new(vec![c], db)?);
                }
            }
            Op::PadRows { before, after } => {
                if wants(0) {
                    let (t, d) = require_mat(input_val(0))?;
                    debug_assert_eq!(node.value.shape()[0], before + t + after);
                    let data = g.data()[before * d..(before + t) * d].to_vec();
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::AvgPoolRows { window } => {
                if wants(0) {
                    let (t, d) = require_mat(input_val(0))?;
                    let t_out = t / window;
                    let inv = 1.0 / *window as f64;
                    let mut data = vec![0.0; t * d];
                    for to in 0..t_out {
                        for j in 0..*window {
                            for c in 0..d {
                                data[(to * window + j) * d + c] = g.data()[to * d + c] * inv;
                            }
                        }
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::LayerNorm { eps } => {
                let (t, d) = require_mat(input_val(0))?;
                let xv = input_val(0).data();
                let gainv = input_val(1).data();
                let mut dx = vec![0.0; t * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                for r in 0..t {
                    let row = &xv[r * d..(r + 1) * d];
                    let (mean, inv_std) = row_moments(row, *eps);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xhat = 0.0;
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * inv_std;
                        let dy = gr[c] * gainv[c];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat[c];
                        dgain[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                    }
                    mean_dy /= d as f64;
                    mean_dy_xhat /= d as f64;
                    for c in 0..d {
                        let dy = gr[c] * gainv[c];
                        dx[r * d + c] = (dy - mean_dy - xhat[c] * mean_dy_xhat) * inv_std;
                    }
                }
                if wants(0) {
                    acc(0, Tensor::new(vec![t, d], dx)?);
                }
                if wants(1) {
                    acc(1, Tensor::new(vec![d], dgain)?);
                }
                if wants(2) {
                    acc(2, Tensor::new(vec![d], dbias)?);
                }
            }
            Op::Sigmoid => {
                if wants(0) {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    acc(0, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Swish => {
                if wants(0) {
                    let data = g
                        .data()
                        .iter()
                        .zip(input_val(0).data())
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    acc(0, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Glu => {
                if wants(0) {
                    let (t, d) = require_mat(&node.value)?;
                    let d2 = 2 * d;
                    let xv = input_val(0).data();
                    let mut data = vec![0.0; t * d2];
                    for r in 0..t {
                        for c in 0..d {
                            let a = xv[r * d2 + c];
                            let s = sigmoid(xv[r * d2 + d + c]);
                            let gv = g.data()[r * d + c];
                            data[r * d2 + c] = gv * s;
                            data[r * d2 + d + c] = gv * a * s * (1.0 - s);
                        }
                    }
                    acc(0, Tensor::new(vec![t, d2], data)?);
                }
            }
            Op::Softmax => {
                if wants(0) {
                    let (t, d) = require_mat(&node.value)?;
                    let yv = node.value.data();
                    let mut data = vec![0.0; t * d];
                    for r in 0..t {
                        let mut dot = 0.0;
                        for c in 0..d {
                            dot += g.data()[r * d + c] * yv[r * d + c];
                        }
                        for c in 0..d {
                            data[r * d + c] = yv[r * d + c] * (g.data()[r * d + c] - dot);
                        }
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::LogSoftmax => {
                if wants(0) {
                    let (t, d) = require_mat(&node.value)?;
                    let yv = node.value.data();
                    let mut data = vec![0.0; t * d];
                    for r in 0..t {
                        let gsum: f64 = g.data()[r * d..(r + 1) * d].iter().sum();
                        for c in 0..d {
                            data[r * d + c] = g.data()[r * d + c] - (yv[r * d + c]).exp() * gsum;
                        }
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::Ln => {
                if wants(0) {
                    let data = g
                        .data()
                        .iter()
                        .zip(input_val(0).data())
                        .map(|(gv, &x)| gv / x)
                        .collect();
                    acc(0, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Exp => {
                if wants(0) {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, &y)| gv * y)
                        .collect();
                    acc(0, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Sqrt => {
                if wants(0) {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, &y)| gv / (2.0 * y))
                        .collect();
                    acc(0, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Sum => {
                if wants(0) {
                    let gv = g.data()[0];
                    let shape = input_val(0).shape().to_vec();
                    let n = input_val(0).len();
                    acc(0, Tensor::new(shape, vec![gv; n])?);
                }
            }
            Op::Mean => {
                if wants(0) {
                    let n = input_val(0).len();
                    let gv = g.data()[0] / n as f64;
                    let shape = input_val(0).shape().to_vec();
                    acc(0, Tensor::new(shape, vec![gv; n])?);
                }
            }
            Op::RowSums => {
                if wants(0) {
                    let (t, d) = require_mat(input_val(0))?;
                    let mut data = vec![0.0; t * d];
                    for r in 0..t {
                        data[r * d..(r + 1) * d].fill(g.data()[r]);
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::ColMeans => {
                if wants(0) {
                    let (t, d) = require_mat(input_val(0))?;
                    let inv = 1.0 / t as f64;
                    let mut data = vec![0.0; t * d];
                    for r in 0..t {
                        for c in 0..d {
                            data[r * d + c] = g.data()[c] * inv;
                        }
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::SliceCols { from, to } => {
                if wants(0) {
                    let (t, d) = require_mat(input_val(0))?;
                    let w = to - from;
                    let mut data = vec![0.0; t * d];
                    for r in 0..t {
                        data[r * d + from..r * d + to]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::ConcatCols => {
                let t = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for (i, &inp) in node.inputs.iter().enumerate() {
                    let v = &self.nodes[inp.0].value;
                    let (_, w) = v.dims2()?;
                    if wants(i) {
                        let mut data = vec![0.0; t * w];
                        for r in 0..t {
                            data[r * w..(r + 1) * w].copy_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        acc(i, Tensor::new(v.shape().to_vec(), data)?);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(indices) => {
                if wants(0) {
                    let (t, d) = require_mat(input_val(0))?;
                    let mut data = vec![0.0; t * d];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            data[i * d + c] += g.data()[r * d + c];
                        }
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
            }
            Op::ReplaceRows(indices) => {
                let (t, d) = require_mat(input_val(0))?;
                if wants(0) {
                    let mut data = g.data().to_vec();
                    for &i in indices {
                        data[i * d..(i + 1) * d].fill(0.0);
                    }
                    acc(0, Tensor::new(vec![t, d], data)?);
                }
                if wants(1) {
                    let mut row = vec![0.0; d];
                    // a row listed twice still receives gradient once
                    let mut seen = vec![false; t];
                    for &i in indices {
                        if seen[i] {
                            continue;
                        }
                        seen[i] = true;
                        for c in 0..d {
                            row[c] += g.data()[i * d + c];
                        }
                    }
                    acc(1, Tensor::new(vec![d], row)?);
                }
            }
            Op::StopGrad | Op::HardOneHot => {}
            Op::SmoothL1 { beta } => {
                let vp = input_val(0);
                let vt = input_val(1);
                let n = vp.len() as f64;
                let scale = g.data()[0] / n;
                let make = |sign: f64| -> Result<Tensor> {
                    let data = vp
                        .data()
                        .iter()
                        .zip(vt.data())
                        .map(|(&p, &t)| {
                            let r = p - t;
                            sign * (r / beta).clamp(-1.0, 1.0) * scale
                        })
                        .collect();
                    Tensor::new(vp.shape().to_vec(), data)
                };
                if wants(0) {
                    acc(0, make(1.0)?);
                }
                if wants(1) {
                    acc(1, make(-1.0)?);
                }
            }
        }
        Ok(())
    }
}

fn require_mat(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("expected rank-2, got {other:?}"))),
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean: f64 = row.iter().sum::<f64>() / d;
    let var: f64 = row
        .iter()
        .map(|&v| {
            let r = v - mean;
            r * r
        })
        .sum::<f64>()
        / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Argmax with ties going to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
