//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value. Backward rules
//! are themselves expressed as tape operations, so a gradient returned by
//! [`Tape::grad`] is an ordinary node that can be differentiated again. That
//! is what makes gradient-matching objectives (a loss over parameter
//! gradients, differentiated with respect to the input) possible.
//!
//! Non-smooth points follow fixed conventions: `relu'(0) = 0`, `clamp` passes
//! gradient on the closed interval, and max pooling routes gradient to the
//! lowest flat index among tied maxima. The pooling argmax is treated as a
//! constant when differentiating twice.

pub mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeometry;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// User-facing operation kinds accepted by [`Tape::forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { size: usize },
    AvgPool2d { size: usize },
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Log,
    Square,
    Sum,
    Mean,
    L2NormSquared,
}

/// Recorded operation, including the internal ops that backward rules emit.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Affine { scale: f64, shift: f64 },
    MatMul,
    Transpose,
    Conv2d(ConvGeometry),
    Conv2dInputGrad(ConvGeometry),
    Conv2dWeightGrad(ConvGeometry),
    MaxPool2d { size: usize, argmax: Arc<[usize]>, input_shape: Vec<usize> },
    Gather { idx: Arc<[usize]>, shape: Vec<usize> },
    Scatter { idx: Arc<[usize]>, shape: Vec<usize> },
    AvgPool2d { size: usize },
    AvgPool2dAdjoint { size: usize, shape: Vec<usize> },
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Clamp { lo: f64, hi: f64 },
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    L2NormSquared,
    Expand { shape: Vec<usize> },
    Reshape { shape: Vec<usize> },
    BroadcastAxis { shape: Vec<usize>, axis: usize },
    SumToAxis { axis: usize },
    RowSum,
    BroadcastRow { cols: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// A second-order gradient request: differentiate a scalar built from the
/// gradients of `inner_objective` w.r.t. `inner_leaves`, with respect to
/// `outer_leaves`.
#[derive(Debug, Clone)]
pub struct DualGradientRequest {
    pub inner_objective: Var,
    pub inner_leaves: Vec<Var>,
    pub outer_leaves: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DualGradient {
    /// Value of the outer objective.
    pub value: f64,
    /// Values of the inner gradients, aligned with `inner_leaves`.
    pub inner: Vec<Tensor>,
    /// Outer gradients, aligned with `outer_leaves`.
    pub outer: Vec<Tensor>,
}

/// A single-threaded computation record. Distinct tapes are independent.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Dimension { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.index].op
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.index].inputs.iter().map(|&index| Var { tape: self.id, index }).collect()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract(format!("variable {v:?} does not belong to tape {}", self.id)));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: &[Var], value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("output of {op:?}")));
        }
        let index = self.nodes.len();
        self.nodes.push(Node { op, inputs: inputs.iter().map(|v| v.index).collect(), value });
        Ok(Var { tape: self.id, index })
    }

    fn inputs_checked(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.check(v))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, &[], value)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, &[], value)
    }

    /// Records `kind` applied to `inputs`.
    pub fn forward(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::Conv2d { .. } => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!("{kind:?} expects {arity} inputs, got {}", inputs.len())));
        }
        let a = inputs[0];
        match kind {
            OpKind::Add => self.add(a, inputs[1]),
            OpKind::Sub => self.sub(a, inputs[1]),
            OpKind::Mul => self.mul(a, inputs[1]),
            OpKind::ScalarMul(s) => self.scale(a, s),
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::Conv2d { stride, padding } => self.conv2d(a, inputs[1], stride, padding),
            OpKind::MaxPool2d { size } => self.maxpool2d(a, size),
            OpKind::AvgPool2d { size } => self.avgpool2d(a, size),
            OpKind::Sigmoid => self.sigmoid(a),
            OpKind::Tanh => self.tanh(a),
            OpKind::Relu => self.relu(a),
            OpKind::Softmax => self.softmax(a),
            OpKind::Log => self.log(a),
            OpKind::Square => self.square(a),
            OpKind::Sum => self.sum(a),
            OpKind::Mean => self.mean(a),
            OpKind::L2NormSquared => self.l2_norm_squared(a),
        }
    }

    fn binary_elementwise(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.inputs_checked(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(name, &[va.shape(), vb.shape()]));
        }
        let out = va.zip_map(vb, f)?;
        self.push(op, &[a, b], out)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f);
        self.push(op, &[a], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Div, "div", a, b, |x, y| x / y)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(Op::Affine { scale, shift }, a, |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    fn reduce(&mut self, op: Op, a: Var, f: impl Fn(&Tensor) -> f64) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(f(self.value(a)));
        self.push(op, &[a], out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Op::Sum, a, Tensor::sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Op::Mean, a, |t| t.sum() / t.len() as f64)
    }

    pub fn l2_norm_squared(&mut self, a: Var) -> Result<Var> {
        self.reduce(Op::L2NormSquared, a, Tensor::norm_squared)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if !v.is_scalar() {
            return Err(dim_err("expand", &[v.shape(), &shape]));
        }
        let out = Tensor::full(shape.clone(), v.item());
        self.push(Op::Expand { shape }, &[a], out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape.clone())?;
        self.push(Op::Reshape { shape }, &[a], out)
    }

    /// Broadcasts a rank-1 tensor along axis `axis` of `shape` (bias addition).
    pub fn broadcast_axis(&mut self, a: Var, shape: Vec<usize>, axis: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if axis >= shape.len() || v.rank() != 1 || v.len() != shape[axis] {
            return Err(dim_err("broadcast_axis", &[v.shape(), &shape]));
        }
        let data: Vec<f64> = kernels::axis_index(&shape, axis).map(|c| v.data()[c]).collect();
        let out = Tensor::new(shape.clone(), data)?;
        self.push(Op::BroadcastAxis { shape, axis }, &[a], out)
    }

    /// Sums every coordinate into its axis-`axis` index, giving a rank-1 tensor.
    pub fn sum_to_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if axis >= v.rank() {
            return Err(dim_err("sum_to_axis", &[v.shape()]));
        }
        let mut out = vec![0.0; v.shape()[axis]];
        for (c, &x) in kernels::axis_index(v.shape(), axis).zip(v.data()) {
            out[c] += x;
        }
        self.push(Op::SumToAxis { axis }, &[a], Tensor::vector(out))
    }

    fn last_dim(&self, a: Var, op: &'static str) -> Result<usize> {
        let shape = self.shape(a);
        shape.last().copied().ok_or_else(|| dim_err(op, &[shape]))
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let cols = self.last_dim(a, "row_sum")?;
        let v = self.value(a);
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let data = v.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(shape, data)?;
        self.push(Op::RowSum, &[a], out)
    }

    /// Repeats a last-axis-extent-1 tensor `cols` times along the last axis.
    pub fn broadcast_row(&mut self, a: Var, cols: usize) -> Result<Var> {
        self.check(a)?;
        if self.last_dim(a, "broadcast_row")? != 1 {
            return Err(dim_err("broadcast_row", &[self.shape(a)]));
        }
        let v = self.value(a);
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = cols;
        let data = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        let out = Tensor::new(shape, data)?;
        self.push(Op::BroadcastRow { cols }, &[a], out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let cols = self.last_dim(a, "softmax")?;
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), kernels::softmax_rows(v.data(), cols))?;
        self.push(Op::Softmax, &[a], out)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let cols = self.last_dim(a, "log_softmax")?;
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), kernels::log_softmax_rows(v.data(), cols))?;
        self.push(Op::LogSoftmax, &[a], out)
    }

    fn matrix_dims(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(a) {
            &[r, c] => Ok((r, c)),
            s => Err(dim_err(op, &[s])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.inputs_checked(&[a, b])?;
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul, &[a, b], Tensor::new(vec![m, n], data)?)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        self.push(Op::Transpose, &[a], Tensor::new(vec![c, r], data)?)
    }

    fn conv_geometry(&self, x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
        let bad = || dim_err("conv2d", &[x, w]);
        let (&[n, c, h, wd], &[o, ci, kh, kw]) = (x, w) else {
            return Err(bad());
        };
        if c != ci || kh != kw || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(bad());
        }
        Ok(ConvGeometry { batch: n, in_channels: c, out_channels: o, in_h: h, in_w: wd, kernel: kh, stride, padding })
    }

    /// 2-D cross-correlation of `x: [N, C, H, W]` with `w: [O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.inputs_checked(&[x, w])?;
        let g = self.conv_geometry(self.shape(x), self.shape(w), stride, padding)?;
        self.conv2d_with(x, w, g)
    }

    fn conv2d_with(&mut self, x: Var, w: Var, g: ConvGeometry) -> Result<Var> {
        let data = kernels::conv2d(&g, self.value(x).data(), self.value(w).data());
        self.push(Op::Conv2d(g), &[x, w], Tensor::new(g.output_shape(), data)?)
    }

    fn conv2d_input_grad(&mut self, gy: Var, w: Var, g: ConvGeometry) -> Result<Var> {
        let data = kernels::conv2d_input_grad(&g, self.value(gy).data(), self.value(w).data());
        self.push(Op::Conv2dInputGrad(g), &[gy, w], Tensor::new(g.input_shape(), data)?)
    }

    fn conv2d_weight_grad_with(&mut self, x: Var, gy: Var, g: ConvGeometry) -> Result<Var> {
        let data = kernels::conv2d_weight_grad(&g, self.value(x).data(), self.value(gy).data());
        self.push(Op::Conv2dWeightGrad(g), &[x, gy], Tensor::new(g.weight_shape(), data)?)
    }

    /// Correlation of `x` with an output-shaped tensor `gy`, producing a
    /// weight-shaped tensor: the weight gradient of `conv2d(x, w)` under
    /// upstream `gy`.
    pub fn conv2d_weight_grad(&mut self, x: Var, gy: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.inputs_checked(&[x, gy])?;
        let (xs, gs) = (self.shape(x).to_vec(), self.shape(gy).to_vec());
        if xs.len() != 4 || gs.len() != 4 {
            return Err(dim_err("conv2d_weight_grad", &[&xs, &gs]));
        }
        let g = self.conv_geometry(&xs, &[gs[1], xs[1], kernel, kernel], stride, padding)?;
        if g.output_shape() != gs {
            return Err(dim_err("conv2d_weight_grad", &[&xs, &gs]));
        }
        self.conv2d_weight_grad_with(x, gy, g)
    }

    fn pool_dims(&self, a: Var, size: usize, op: &'static str) -> Result<Vec<usize>> {
        let s = self.shape(a);
        if s.len() != 4 || size == 0 || !s[2].is_multiple_of(size) || !s[3].is_multiple_of(size) {
            return Err(dim_err(op, &[s]));
        }
        Ok(s.to_vec())
    }

    /// Non-overlapping `size × size` max pooling (spatial extents must divide).
    pub fn maxpool2d(&mut self, a: Var, size: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.pool_dims(a, size, "maxpool2d")?;
        let (vals, idx) = kernels::maxpool2d(self.value(a).data(), &shape, size);
        let out = Tensor::new(vec![shape[0], shape[1], shape[2] / size, shape[3] / size], vals)?;
        self.push(Op::MaxPool2d { size, argmax: idx.into(), input_shape: shape }, &[a], out)
    }

    pub fn avgpool2d(&mut self, a: Var, size: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.pool_dims(a, size, "avgpool2d")?;
        let vals = kernels::avgpool2d(self.value(a).data(), &shape, size);
        let out = Tensor::new(vec![shape[0], shape[1], shape[2] / size, shape[3] / size], vals)?;
        self.push(Op::AvgPool2d { size }, &[a], out)
    }

    fn avgpool2d_adjoint(&mut self, a: Var, size: usize, shape: Vec<usize>) -> Result<Var> {
        let vals = kernels::avgpool2d_adjoint(self.value(a).data(), &shape, size);
        let out = Tensor::new(shape.clone(), vals)?;
        self.push(Op::AvgPool2dAdjoint { size, shape }, &[a], out)
    }

    fn gather(&mut self, a: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape.clone(), kernels::gather(self.value(a).data(), &idx))?;
        self.push(Op::Gather { idx, shape }, &[a], out)
    }

    fn scatter(&mut self, a: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let len = shape.iter().product();
        let out = Tensor::new(shape.clone(), kernels::scatter(self.value(a).data(), &idx, len))?;
        self.push(Op::Scatter { idx, shape }, &[a], out)
    }

    /// Vector-Jacobian product of node `i` under upstream `g`, for the input
    /// slots flagged in `wants`. Emits tape nodes.
    fn vjp(&mut self, i: usize, g: Var, wants: &[bool]) -> Result<Vec<Option<Var>>> {
        let node_var = Var { tape: self.id, index: i };
        let ins: Vec<Var> = self.nodes[i].inputs.iter().map(|&index| Var { tape: self.id, index }).collect();
        let op = self.nodes[i].op.clone();
        let want = |k: usize| wants.get(k).copied().unwrap_or(false);
        let mut out = vec![None; ins.len()];
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add => {
                if want(0) {
                    out[0] = Some(g);
                }
                if want(1) {
                    out[1] = Some(g);
                }
            }
            Op::Sub => {
                if want(0) {
                    out[0] = Some(g);
                }
                if want(1) {
                    out[1] = Some(self.neg(g)?);
                }
            }
            Op::Mul => {
                if want(0) {
                    out[0] = Some(self.mul(g, ins[1])?);
                }
                if want(1) {
                    out[1] = Some(self.mul(g, ins[0])?);
                }
            }
            Op::Div => {
                if want(0) {
                    out[0] = Some(self.div(g, ins[1])?);
                }
                if want(1) {
                    let t = self.mul(g, node_var)?;
                    let t = self.div(t, ins[1])?;
                    out[1] = Some(self.neg(t)?);
                }
            }
            Op::Affine { scale, .. } => out[0] = Some(self.scale(g, scale)?),
            Op::MatMul => {
                if want(0) {
                    let bt = self.transpose(ins[1])?;
                    out[0] = Some(self.matmul(g, bt)?);
                }
                if want(1) {
                    let at = self.transpose(ins[0])?;
                    out[1] = Some(self.matmul(at, g)?);
                }
            }
            Op::Transpose => out[0] = Some(self.transpose(g)?),
            Op::Conv2d(geom) => {
                if want(0) {
                    out[0] = Some(self.conv2d_input_grad(g, ins[1], geom)?);
                }
                if want(1) {
                    out[1] = Some(self.conv2d_weight_grad_with(ins[0], g, geom)?);
                }
            }
            Op::Conv2dInputGrad(geom) => {
                // inputs: (gy, w); linear in each.
                if want(0) {
                    out[0] = Some(self.conv2d_with(g, ins[1], geom)?);
                }
                if want(1) {
                    out[1] = Some(self.conv2d_weight_grad_with(g, ins[0], geom)?);
                }
            }
            Op::Conv2dWeightGrad(geom) => {
                // inputs: (x, gy)
                if want(0) {
                    out[0] = Some(self.conv2d_input_grad(ins[1], g, geom)?);
                }
                if want(1) {
                    out[1] = Some(self.conv2d_with(ins[0], g, geom)?);
                }
            }
            Op::MaxPool2d { argmax, input_shape, .. } => out[0] = Some(self.scatter(g, argmax, input_shape)?),
            Op::Scatter { idx, .. } => {
                let shape = self.shape(ins[0]).to_vec();
                out[0] = Some(self.gather(g, idx, shape)?);
            }
            Op::Gather { idx, .. } => {
                let shape = self.shape(ins[0]).to_vec();
                out[0] = Some(self.scatter(g, idx, shape)?);
            }
            Op::AvgPool2d { size } => {
                let shape = self.shape(ins[0]).to_vec();
                out[0] = Some(self.avgpool2d_adjoint(g, size, shape)?);
            }
            Op::AvgPool2dAdjoint { size, .. } => out[0] = Some(self.avgpool2d(g, size)?),
            Op::Sigmoid => {
                let one_minus = self.affine(node_var, -1.0, 1.0)?;
                let d = self.mul(node_var, one_minus)?;
                out[0] = Some(self.mul(g, d)?);
            }
            Op::Tanh => {
                let sq = self.square(node_var)?;
                let d = self.affine(sq, -1.0, 1.0)?;
                out[0] = Some(self.mul(g, d)?);
            }
            Op::Relu => {
                let mask = self.value(ins[0]).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask)?;
                out[0] = Some(self.mul(g, mask)?);
            }
            Op::Clamp { lo, hi } => {
                let mask = self.value(ins[0]).map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                let mask = self.constant(mask)?;
                out[0] = Some(self.mul(g, mask)?);
            }
            Op::Exp => out[0] = Some(self.mul(g, node_var)?),
            Op::Log => out[0] = Some(self.div(g, ins[0])?),
            Op::Square => {
                let two_x = self.scale(ins[0], 2.0)?;
                out[0] = Some(self.mul(g, two_x)?);
            }
            Op::Softmax => {
                let cols = self.last_dim(node_var, "softmax")?;
                let gs = self.mul(g, node_var)?;
                let r = self.row_sum(gs)?;
                let b = self.broadcast_row(r, cols)?;
                let d = self.sub(g, b)?;
                out[0] = Some(self.mul(node_var, d)?);
            }
            Op::LogSoftmax => {
                let cols = self.last_dim(node_var, "log_softmax")?;
                let p = self.exp(node_var)?;
                let r = self.row_sum(g)?;
                let b = self.broadcast_row(r, cols)?;
                let pb = self.mul(p, b)?;
                out[0] = Some(self.sub(g, pb)?);
            }
            Op::Sum => {
                let shape = self.shape(ins[0]).to_vec();
                out[0] = Some(self.expand(g, shape)?);
            }
            Op::Mean => {
                let shape = self.shape(ins[0]).to_vec();
                let n = self.value(ins[0]).len() as f64;
                let gs = self.scale(g, 1.0 / n)?;
                out[0] = Some(self.expand(gs, shape)?);
            }
            Op::L2NormSquared => {
                let shape = self.shape(ins[0]).to_vec();
                let ge = self.expand(g, shape)?;
                let two_x = self.scale(ins[0], 2.0)?;
                out[0] = Some(self.mul(ge, two_x)?);
            }
            Op::Expand { .. } => {
                let shape = self.shape(ins[0]).to_vec();
                let s = self.sum(g)?;
                out[0] = Some(if shape == [1] { s } else { self.reshape(s, shape)? });
            }
            Op::Reshape { .. } => {
                let shape = self.shape(ins[0]).to_vec();
                out[0] = Some(self.reshape(g, shape)?);
            }
            Op::BroadcastAxis { axis, .. } => out[0] = Some(self.sum_to_axis(g, axis)?),
            Op::SumToAxis { axis } => {
                let shape = self.shape(ins[0]).to_vec();
                out[0] = Some(self.broadcast_axis(g, shape, axis)?);
            }
            Op::RowSum => {
                let cols = self.last_dim(ins[0], "row_sum")?;
                out[0] = Some(self.broadcast_row(g, cols)?);
            }
            Op::BroadcastRow { .. } => out[0] = Some(self.row_sum(g)?),
        }
        Ok(out)
    }

    /// Gradient of the scalar `objective` with respect to each of `leaves`,
    /// returned as tape nodes that can be differentiated further. Leaves the
    /// objective does not depend on receive zero constants.
    pub fn grad(&mut self, objective: Var, leaves: &[Var]) -> Result<Vec<Var>> {
        self.check(objective)?;
        self.inputs_checked(leaves)?;
        let obj_shape = self.shape(objective).to_vec();
        if obj_shape.iter().product::<usize>() != 1 {
            return Err(Error::contract(format!("objective must be scalar, got shape {obj_shape:?}")));
        }
        let end = objective.index + 1;
        let start = leaves.iter().map(|l| l.index).min().unwrap_or(end).min(end);
        let mut on_path = vec![false; end];
        for l in leaves {
            if l.index < end {
                on_path[l.index] = true;
            }
        }
        for i in start..end {
            if !on_path[i] && self.nodes[i].inputs.iter().any(|&j| on_path[j]) {
                on_path[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if on_path[objective.index] {
            adjoint[objective.index] = Some(self.constant(Tensor::ones(obj_shape))?);
        }
        for i in (start..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            let wants: Vec<bool> = self.nodes[i].inputs.iter().map(|&j| on_path[j]).collect();
            if !wants.iter().any(|&w| w) {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let contributions = self.vjp(i, g, &wants)?;
            for (j, c) in inputs.into_iter().zip(contributions) {
                let Some(c) = c else { continue };
                adjoint[j] = Some(match adjoint[j] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        leaves
            .iter()
            .map(|l| match adjoint.get(l.index).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(*l).to_vec());
                    self.constant(zeros)
                }
            })
            .collect()
    }

    /// First-order gradient values. Nodes emitted by the backward pass are
    /// discarded afterwards.
    pub fn backward(&mut self, objective: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let result = self.grad(objective, leaves).map(|gs| gs.iter().map(|&g| self.value(g).clone()).collect());
        self.nodes.truncate(mark);
        result
    }

    /// Gradient of a function of gradients. `objective` receives the inner
    /// gradient nodes and builds the outer scalar; its derivative w.r.t. the
    /// outer leaves is returned.
    pub fn grad_of_grad<F>(&mut self, req: &DualGradientRequest, objective: F) -> Result<DualGradient>
    where
        F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
    {
        self.check(req.inner_objective)?;
        self.inputs_checked(&req.inner_leaves)?;
        self.inputs_checked(&req.outer_leaves)?;
        let inner = self.grad(req.inner_objective, &req.inner_leaves)?;
        let outer_objective = objective(self, &inner)?;
        self.check(outer_objective)?;
        let outer = self.backward(outer_objective, &req.outer_leaves)?;
        Ok(DualGradient { value: self.value(outer_objective).item(), inner: inner.iter().map(|&g| self.value(g).clone()).collect(), outer })
    }

    /// Re-evaluates every recorded node from the current leaf and constant
    /// values, returning the recomputed outputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut scratch = Tape { id: self.id, nodes: Vec::with_capacity(self.nodes.len()) };
        for node in &self.nodes {
            let ins: Vec<Var> = node.inputs.iter().map(|&index| Var { tape: self.id, index }).collect();
            let v = match &node.op {
                Op::Leaf | Op::Constant => {
                    scratch.push(node.op.clone(), &[], node.value.clone())?;
                    continue;
                }
                op => scratch.reapply(op, &ins)?,
            };
            debug_assert_eq!(v.index + 1, scratch.nodes.len());
        }
        Ok(scratch.nodes.into_iter().map(|n| n.value).collect())
    }

    fn reapply(&mut self, op: &Op, ins: &[Var]) -> Result<Var> {
        let a = ins[0];
        match op.clone() {
            Op::Leaf | Op::Constant => unreachable!(),
            Op::Add => self.add(a, ins[1]),
            Op::Sub => self.sub(a, ins[1]),
            Op::Mul => self.mul(a, ins[1]),
            Op::Div => self.div(a, ins[1]),
            Op::Affine { scale, shift } => self.affine(a, scale, shift),
            Op::MatMul => self.matmul(a, ins[1]),
            Op::Transpose => self.transpose(a),
            Op::Conv2d(g) => self.conv2d_with(a, ins[1], g),
            Op::Conv2dInputGrad(g) => self.conv2d_input_grad(a, ins[1], g),
            Op::Conv2dWeightGrad(g) => self.conv2d_weight_grad_with(a, ins[1], g),
            Op::MaxPool2d { size, .. } => self.maxpool2d(a, size),
            Op::Gather { idx, shape } => self.gather(a, idx, shape),
            Op::Scatter { idx, shape } => self.scatter(a, idx, shape),
            Op::AvgPool2d { size } => self.avgpool2d(a, size),
            Op::AvgPool2dAdjoint { size, shape } => self.avgpool2d_adjoint(a, size, shape),
            Op::Sigmoid => self.sigmoid(a),
            Op::Tanh => self.tanh(a),
            Op::Relu => self.relu(a),
            Op::Exp => self.exp(a),
            Op::Log => self.log(a),
            Op::Square => self.square(a),
            Op::Clamp { lo, hi } => self.clamp(a, lo, hi),
            Op::Softmax => self.softmax(a),
            Op::LogSoftmax => self.log_softmax(a),
            Op::Sum => self.sum(a),
            Op::Mean => self.mean(a),
            Op::L2NormSquared => self.l2_norm_squared(a),
            Op::Expand { shape } => self.expand(a, shape),
            Op::Reshape { shape } => self.reshape(a, shape),
            Op::BroadcastAxis { shape, axis } => self.broadcast_axis(a, shape, axis),
            Op::SumToAxis { axis } => self.sum_to_axis(a, axis),
            Op::RowSum => self.row_sum(a),
            Op::BroadcastRow { cols } => self.broadcast_row(a, cols),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = tape.forward(OpKind::MatMul, &[a, i]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn conv_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
        let w = tape.leaf(Tensor::ones(vec![1, 1, 2, 2])).unwrap();
        let y = tape.forward(OpKind::Conv2d { stride: 1, padding: 0 }, &[x, w]).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::ones(vec![2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Dimension { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(tape.leaf(Tensor::scalar(f64::NAN)), Err(Error::Numeric { .. })));
        let z = tape.leaf(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(tape.log(z), Err(Error::Numeric { .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0])).unwrap();
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2])).unwrap();
        let y = tape.leaf(Tensor::ones(vec![3])).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, &[x, y]).unwrap();
        assert_eq!(g[0], Tensor::zeros(vec![2, 2]));
        assert_eq!(g[1], Tensor::ones(vec![3]));
    }

    #[test]
    fn non_scalar_objective_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2])).unwrap();
        assert!(matches!(tape.backward(x, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn variables_from_other_tapes_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0)).unwrap();
        let y = b.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(a.backward(x, &[y]), Err(Error::Contract(_))));
        let req = DualGradientRequest { inner_objective: x, inner_leaves: vec![x], outer_leaves: vec![y] };
        assert!(matches!(a.grad_of_grad(&req, |_, g| Ok(g[0])), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_of_grad_closed_form() {
        // f = θ x², (∂f/∂θ)² = x⁴, d/dx = 4x³ = 32 at x = 2.
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(1.5)).unwrap();
        let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let x2 = tape.square(x).unwrap();
        let f = tape.mul(theta, x2).unwrap();
        let req = DualGradientRequest { inner_objective: f, inner_leaves: vec![theta], outer_leaves: vec![x] };
        let out = tape.grad_of_grad(&req, |tape, g| tape.square(g[0])).unwrap();
        assert_eq!(out.value, 16.0);
        assert_eq!(out.inner[0].item(), 4.0);
        assert!((out.outer[0].item() - 32.0).abs() < 1e-12);
    }

    #[test]
    fn relu_kink_uses_zero_side() {
        let grad_at_zero = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(vec![3], vec![-1.0, 0.0, 1.0])).unwrap();
            let r = tape.relu(x).unwrap();
            let s = tape.sum(r).unwrap();
            tape.backward(s, &[x]).unwrap().remove(0)
        };
        let g = grad_at_zero();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(g, grad_at_zero());
    }

    #[test]
    fn maxpool_routes_to_first_maximum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 1, 2, 2], vec![3.0, 3.0, 1.0, 3.0])).unwrap();
        let p = tape.maxpool2d(x, 2).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 1, 4, 4], (0..16).map(|i| (i as f64 * 0.37).sin()).collect())).unwrap();
        let w = tape.leaf(t(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.11).cos()).collect())).unwrap();
        let c = tape.conv2d(x, w, 1, 1).unwrap();
        let s = tape.sigmoid(c).unwrap();
        let p = tape.maxpool2d(s, 2).unwrap();
        let f = tape.reshape(p, vec![1, 8]).unwrap();
        let sm = tape.log_softmax(f).unwrap();
        let l = tape.mean(sm).unwrap();
        let _ = tape.grad(l, &[x, w]).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, &tape.nodes[i].value, "node {i}");
        }
    }

    #[test]
    fn linear_layer_bias_broadcast() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2, 2, 2])).unwrap();
        let b = tape.leaf(t(vec![2], vec![1.0, -1.0])).unwrap();
        let bb = tape.broadcast_axis(b, vec![2, 2, 2, 2], 1).unwrap();
        let y = tape.add(x, bb).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, &[b]).unwrap();
        assert_eq!(g[0].data(), &[8.0, 8.0]);
    }
}
