//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order. Parents
//! are always created before their children, so replaying the tape backwards
//! visits nodes in reverse topological order. Handles ([`Var`]) are plain
//! indices into the tape and are only meaningful for the graph that made them.
//!
//! ```
//! use tokenhalt::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::rc::Rc;

use super::conv;
use super::dense::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-registered differentiable operation whose gradient is supplied by
/// hand instead of derived from primitives.
pub trait CustomBackward {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One gradient per input, each shaped like its input.
    fn backward(
        &self,
        upstream: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
    ) -> Result<Vec<Tensor>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Rc<[usize]>,
    },
    ScatterRows {
        x: Var,
        idx: Rc<[usize]>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Rc<[f64]>,
        rstd: Rc<[f64]>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Upsample(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Maximum(Var, Var),
    Custom {
        op: Rc<dyn CustomBackward>,
        inputs: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn bad_shape(op: &'static str, t: &Tensor, reason: &str) -> Error {
    Error::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.to_string(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x], name)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    fn row_broadcast(&mut self, x: Var, r: Var, name: &'static str, add: bool) -> Result<Var> {
        let tx = self.value(x);
        let tr = self.value(r);
        let c = *tx.shape().last().unwrap_or(&0);
        if tx.rank() < 1 || tr.len() != c {
            return Err(mismatch(name, tx, tr));
        }
        let rd = tr.data();
        let data = tx
            .data()
            .chunks(c.max(1))
            .flat_map(|row| {
                row.iter()
                    .zip(rd)
                    .map(|(&a, &b)| if add { a + b } else { a * b })
            })
            .collect::<Vec<_>>();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let op = if add {
            Op::AddRow(x, r)
        } else {
            Op::MulRow(x, r)
        };
        self.push(value, op, &[x, r], name)
    }

    /// `x[.., c] + r[c]` for every leading index.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, "add_row", true)
    }

    /// `x[.., c] * r[c]` for every leading index.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, "mul_row", false)
    }

    /// `x[n, c] * col[n]`, i.e. scales each row.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let tx = self.value(x);
        let tc = self.value(col);
        if tx.rank() != 2 || tc.len() != tx.shape()[0] {
            return Err(mismatch("mul_col", tx, tc));
        }
        let c = tx.shape()[1];
        let mut data = tx.data().to_vec();
        for (i, &s) in tc.data().iter().enumerate() {
            for v in &mut data[i * c..(i + 1) * c] {
                *v *= s;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(value, Op::MulCol(x, col), &[x, col], "mul_col")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, k), "scale", |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), "add_scalar", |v| v + k)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.scale(x, -1.0)?;
        self.add_scalar(n, 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), "exp", f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), "log", f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), "abs", f64::abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp { x, lo, hi }, "clamp", |v| v.clamp(lo, hi))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Maximum(a, b), "maximum", f64::max)
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(bad_shape("sum_axis", tx, "axis out of range"));
        }
        let (outer, len, inner) = split_axis(tx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += tx.data()[base + i];
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SumAxis { x, axis }, &[x], "sum_axis")
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).clone();
        if axis >= first.rank() {
            return Err(bad_shape("concat", &first, "axis out of range"));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let t = self.value(p);
            let ok = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .enumerate()
                    .all(|(d, &s)| d == axis || s == first.shape()[d]);
            if !ok {
                return Err(mismatch("concat", &first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        )
    }

    /// Rows `x[idx[i]]` stacked in order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 1 || idx.iter().any(|&i| i >= tx.shape()[0]) {
            return Err(bad_shape("gather_rows", tx, "index out of range"));
        }
        let value = tx.gather_rows(idx);
        self.push(
            value,
            Op::GatherRows { x, idx: idx.into() },
            &[x],
            "gather_rows",
        )
    }

    /// Zero tensor with `rows` rows where row `idx[i]` receives `x[i]`
    /// (duplicates accumulate).
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 1 || tx.shape()[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
            return Err(bad_shape("scatter_rows", tx, "index list does not fit"));
        }
        let c: usize = tx.shape()[1..].iter().product();
        let mut shape = tx.shape().to_vec();
        shape[0] = rows;
        let mut out = Tensor::zeros(&shape);
        for (i, &r) in idx.iter().enumerate() {
            let src = &tx.data()[i * c..(i + 1) * c];
            for (o, s) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                *o += s;
            }
        }
        self.push(
            out,
            Op::ScatterRows { x, idx: idx.into() },
            &[x],
            "scatter_rows",
        )
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start > end || end > tx.shape()[1] {
            return Err(bad_shape("slice_cols", tx, "column range out of bounds"));
        }
        let (n, c) = tx.dims2();
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&tx.data()[r * c + start..r * c + end]);
        }
        let value = Tensor::new(vec![n, w], data)?;
        self.push(value, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(bad_shape("transpose", tx, "rank 2 required"));
        }
        let value = tx.transpose2();
        self.push(value, Op::Transpose(x), &[x], "transpose")
    }

    /// Numerically stable softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(bad_shape("softmax_rows", tx, "rank 2 required"));
        }
        let (n, c) = tx.dims2();
        let mut data = tx.data().to_vec();
        for r in 0..n {
            let row = &mut data[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        self.push(value, Op::SoftmaxRows(x), &[x], "softmax_rows")
    }

    /// Layer normalization over the last axis of `[n, d]` with affine gain
    /// and bias of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(bad_shape("layer_norm", tx, "rank 2 required"));
        }
        let (n, d) = tx.dims2();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(mismatch("layer_norm", tx, self.value(gain)));
        }
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, v) in row.iter().enumerate() {
                xhat[r * d + j] = (v - mean) * rs;
            }
        }
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gd[i % d] + bd[i % d])
            .collect();
        let value = Tensor::new(vec![n, d], out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: xhat.into(),
                rstd: rstd.into(),
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// 3×3 convolution with zero padding 1 on channels-last input
    /// `[h, w, cin]`, weights `[3, 3, cin, cout]` and bias `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if stride != 1 && stride != 2 {
            return Err(bad_shape("conv2d", tx, "stride must be 1 or 2"));
        }
        if tx.rank() != 3
            || tw.rank() != 4
            || tw.shape()[..2] != [3, 3]
            || tw.shape()[2] != tx.shape()[2]
        {
            return Err(mismatch("conv2d", tx, tw));
        }
        if tb.len() != tw.shape()[3] {
            return Err(mismatch("conv2d", tw, tb));
        }
        let value = conv::forward(tx, tw, tb, stride);
        self.push(value, Op::Conv2d { x, w, b, stride }, &[x, w, b], "conv2d")
    }

    /// Nearest-neighbour upsampling of `[h, w, c]` to `[out_h, out_w, c]`
    /// where source cell is `(y / 2, x / 2)`.
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 || (out_h + 1) / 2 != tx.shape()[0] || (out_w + 1) / 2 != tx.shape()[1] {
            return Err(bad_shape(
                "upsample2x",
                tx,
                "target size must halve to the input",
            ));
        }
        let value = conv::upsample_forward(tx, out_h, out_w);
        self.push(value, Op::Upsample(x), &[x], "upsample2x")
    }

    /// Applies a [`CustomBackward`] rule.
    pub fn custom(&mut self, op: Rc<dyn CustomBackward>, inputs: &[Var]) -> Result<Var> {
        let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&ins)?;
        let name = op.name().to_string();
        self.push(
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            inputs,
            &name,
        )
    }

    /// `x · W + b` for `x: [n, i]`, `W: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse sweep from a scalar root. Gradients from a previous call are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot { shape });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Tensor) -> Tensor) {
        if self.nodes[v.0].requires_grad {
            let g = f(&self.nodes[v.0].value);
            self.accumulate(v, g);
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(a).dims2();
                let m = self.value(b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; n * k];
                    matmul_nt_into(gd, self.value(b).data(), &mut ga, n, k, m);
                    self.accumulate(a, Tensor::new(vec![n, k], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * m];
                    matmul_tn_into(self.value(a).data(), gd, &mut gb, n, k, m);
                    self.accumulate(b, Tensor::new(vec![k, m], gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ta = self.value(a).clone();
                let tb = self.value(b).clone();
                self.accumulate(a, zip_map(g, &tb, |x, y| x * y));
                self.accumulate(b, zip_map(g, &ta, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let ta = self.value(a).clone();
                let tb = self.value(b).clone();
                self.accumulate(a, zip_map(g, &tb, |x, y| x / y));
                let q = zip_map(&ta, &tb, |x, y| -x / (y * y));
                self.accumulate(b, zip_map(g, &q, |x, y| x * y));
            }
            Op::AddRow(x, r) => {
                let c = self.value(r).len();
                self.accumulate(x, g.clone());
                let mut gr = vec![0.0; c];
                for row in gd.chunks(c.max(1)) {
                    for (o, v) in gr.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let shape = self.value(r).shape().to_vec();
                self.accumulate(r, Tensor::new(shape, gr)?);
            }
            Op::MulRow(x, r) => {
                let tr = self.value(r).clone();
                let tx = self.value(x).clone();
                let c = tr.len();
                let gx: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * tr.data()[j % c])
                    .collect();
                self.accumulate(x, Tensor::new(tx.shape().to_vec(), gx)?);
                let mut gr = vec![0.0; c];
                for (j, v) in gd.iter().enumerate() {
                    gr[j % c] += v * tx.data()[j];
                }
                self.accumulate(r, Tensor::new(tr.shape().to_vec(), gr)?);
            }
            Op::MulCol(x, col) => {
                let tx = self.value(x).clone();
                let tc = self.value(col).clone();
                let c = tx.shape()[1];
                let mut gx = gd.to_vec();
                let mut gc = vec![0.0; tc.len()];
                for (r, &s) in tc.data().iter().enumerate() {
                    let mut acc = 0.0;
                    for j in r * c..(r + 1) * c {
                        acc += gd[j] * tx.data()[j];
                        gx[j] *= s;
                    }
                    gc[r] = acc;
                }
                self.accumulate(x, Tensor::new(tx.shape().to_vec(), gx)?);
                self.accumulate(col, Tensor::new(tc.shape().to_vec(), gc)?);
            }
            Op::Scale(x, k) => self.accumulate(x, g.map(|v| v * k)),
            Op::AddScalar(x) => self.accumulate(x, g.clone()),
            Op::Exp(x) => {
                let y = self.nodes[i].value.clone();
                self.accumulate(x, zip_map(g, &y, |a, b| a * b));
            }
            Op::Log(x) => self.accumulate_with(x, |tx| zip_map(g, tx, |a, b| a / b)),
            Op::Abs(x) => self.accumulate_with(x, |tx| zip_map(g, tx, |a, b| a * sign(b))),
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.clone();
                self.accumulate(x, zip_map(g, &y, |a, s| a * s * (1.0 - s)));
            }
            Op::Relu(x) => {
                self.accumulate_with(x, |tx| zip_map(g, tx, |a, b| if b > 0.0 { a } else { 0.0 }))
            }
            Op::Clamp { x, lo, hi } => self.accumulate_with(x, |tx| {
                zip_map(g, tx, |a, b| if b >= lo && b <= hi { a } else { 0.0 })
            }),
            Op::Maximum(a, b) => {
                let ta = self.value(a).clone();
                let tb = self.value(b).clone();
                // ties route the gradient to the first argument
                let mask = zip_map(&ta, &tb, |x, y| if x >= y { 1.0 } else { 0.0 });
                self.accumulate(a, zip_map(g, &mask, |v, m| v * m));
                self.accumulate(b, zip_map(g, &mask, |v, m| v * (1.0 - m)));
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate_with(x, |tx| Tensor::full(tx.shape(), s));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.value(x).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for k in 0..inner {
                            gx[(o * len + a) * inner + k] = gd[o * inner + k];
                        }
                    }
                }
                self.accumulate(x, Tensor::new(shape, gx)?);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = shape[axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    offset += len;
                    self.accumulate(p, Tensor::new(shape, gp)?);
                }
            }
            Op::GatherRows { x, idx } => {
                let shape = self.value(x).shape().to_vec();
                let c: usize = shape[1..].iter().product();
                let mut gx = Tensor::zeros(&shape);
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx.data_mut()[r * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::ScatterRows { x, idx } => {
                let c: usize = g.shape()[1..].iter().product();
                let mut shape = g.shape().to_vec();
                shape[0] = idx.len();
                let mut gx = Vec::with_capacity(idx.len() * c);
                for &r in idx.iter() {
                    gx.extend_from_slice(&gd[r * c..(r + 1) * c]);
                }
                self.accumulate(x, Tensor::new(shape, gx)?);
            }
            Op::SliceCols { x, start } => {
                let shape = self.value(x).shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let w = g.shape()[1];
                let mut gx = vec![0.0; n * c];
                for r in 0..n {
                    gx[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(x, Tensor::new(shape, gx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, g.clone().reshape(&shape)?);
            }
            Op::Transpose(x) => self.accumulate(x, g.transpose2()),
            Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.clone();
                let (n, c) = y.dims2();
                let mut gx = vec![0.0; n * c];
                for r in 0..n {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(x, Tensor::new(vec![n, c], gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gain_t = self.value(gain).clone();
                let d = gain_t.len();
                let n = rstd.len();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        gg[j] += gd[k] * xhat[k];
                        gb[j] += gd[k];
                        let dh = gd[k] * gain_t.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[k];
                    }
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = gd[k] * gain_t.data()[j];
                        gx[k] = rstd[r] * (dh - sum_dh / d as f64 - xhat[k] * sum_dh_h / d as f64);
                    }
                }
                let xs = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::new(xs, gx)?);
                self.accumulate(gain, Tensor::new(gain_t.shape().to_vec(), gg)?);
                let bs = self.value(bias).shape().to_vec();
                self.accumulate(bias, Tensor::new(bs, gb)?);
            }
            Op::Conv2d { x, w, b, stride } => {
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad || self.nodes[b.0].requires_grad;
                let (gx, gw, gb) =
                    conv::backward(self.value(x), self.value(w), g, stride, need_x, need_w);
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                if let Some((gw, gb)) = gw.zip(gb) {
                    self.accumulate(w, gw);
                    self.accumulate(b, gb);
                }
            }
            Op::Upsample(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, conv::upsample_backward(g, &shape));
            }
            Op::Custom { op, inputs } => {
                let grads = {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    op.backward(g, &ins, &self.nodes[i].value)?
                };
                if grads.len() != inputs.len() {
                    return Err(Error::CustomArity {
                        op: op.name().to_string(),
                        expected: inputs.len(),
                        got: grads.len(),
                    });
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    if gv.shape() != self.value(*v).shape() {
                        return Err(mismatch("custom backward", &gv, self.value(*v)));
                    }
                    self.accumulate(*v, gv);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked at forward time")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
