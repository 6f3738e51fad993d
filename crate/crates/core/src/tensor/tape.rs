//! Reverse-mode tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. `backward` walks the nodes in strict reverse order.
//! A tape lives for one forward/backward pass and is then dropped.

use super::kernels::{self, ConvGeom};
use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp<T> {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Scale(T),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    LogSoftmax(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    TransposeLast2 {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Select {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        index: usize,
    },
    PickMean {
        x: Var,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    tracked: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the tracked leaves after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: tracked,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    /// Dispatch over the elementwise family.
    pub fn elementwise(&mut self, kind: ElementwiseOp<T>, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::InvalidArgument(format!("{kind:?} needs a second operand")))
        };
        match kind {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Relu => Ok(self.relu(a)),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Scale(s) => Ok(self.scale(a, s)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `[m×k]·[k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        gemm(
            m,
            k,
            p,
            MatRef::n(self.value(a).data()),
            MatRef::n(self.value(b).data()),
            T::zero(),
            &mut out,
        );
        let out = Tensor {
            shape: vec![m, p],
            data: out,
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let k = sb[0];
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data.chunks_mut(k) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    /// `x: [B, C_in, H, W]`, `w: [C_out, C_in, k, k]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv2d bias", sb, &sw[..1]));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let k = sw[2];
        if k > sx[2] + 2 * pad || k > sx[3] + 2 * pad {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {k} exceeds padded input {sx:?} (pad {pad})"),
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            k,
            stride,
            pad,
            h_out: (sx[2] + 2 * pad - k) / stride + 1,
            w_out: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let keep = self.needs(w) || self.needs(bias) || self.needs(x);
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            &geom,
            self.value(w).data(),
            self.value(bias).data(),
            keep && (self.needs(w) || self.needs(bias)),
        );
        let out = Tensor {
            shape: vec![geom.batch, geom.c_out, geom.h_out, geom.w_out],
            data: out,
        };
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            &[x, w, bias],
        ))
    }

    /// Max pooling over the last two axes of `[B, C, H, W]`.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                msg: format!("expected [B, C, H, W], got {sx:?}"),
            });
        }
        if window == 0 || stride == 0 || window > sx[2] || window > sx[3] {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                msg: format!("window {window} (stride {stride}) does not fit input {sx:?}"),
            });
        }
        let (out, argmax) =
            kernels::maxpool_forward(self.value(x).data(), sx[0] * sx[1], sx[2], sx[3], window, stride);
        let out = Tensor {
            shape: vec![sx[0], sx[1], (sx[2] - window) / stride + 1, (sx[3] - window) / stride + 1],
            data: out,
        };
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let k = *s.last().unwrap_or(&0);
        if k < 2 {
            return Err(Error::InvalidShape {
                op: "log_softmax",
                msg: format!("class axis must have at least 2 entries, got {s:?}"),
            });
        }
        let out = Tensor {
            shape: s.to_vec(),
            data: kernels::log_softmax_rows(self.value(x).data(), k),
        };
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                msg: format!("axis {axis} invalid for {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let out = Tensor { shape, data: out };
        Ok(self.push(out, Op::SumAxis { x, outer, len, inner }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).unwrap_or(&1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize(len).unwrap_or_else(T::one)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `[B, R, C] -> [B, C, R]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op: "transpose_last2",
                msg: format!("expected rank 3, got {s:?}"),
            });
        }
        let (batch, rows, cols) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let out = Tensor {
            shape: vec![batch, cols, rows],
            data: out,
        };
        Ok(self.push(out, Op::TransposeLast2 { x, batch, rows, cols }, &[x]))
    }

    /// Slice `index` out of `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] || s.len() < 2 {
            return Err(Error::InvalidShape {
                op: "select",
                msg: format!("index {index} on axis {axis} invalid for {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + index) * inner..(o * len + index + 1) * inner]);
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let out = Tensor { shape, data: out };
        Ok(self.push(
            out,
            Op::Select {
                x,
                outer,
                len,
                inner,
                index,
            },
            &[x],
        ))
    }

    /// Mean over rows of `x[r, labels[r]]` for `x: [R, K]`.
    pub fn pick_mean(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape("pick_mean", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let src = self.value(x).data();
        let mut acc = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            acc = acc + src[r * k + l];
        }
        let mean = acc / T::from_usize(labels.len()).unwrap_or_else(T::one);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::PickMean {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        ))
    }

    /// Branch choices of every piecewise op: the sign of each relu input and
    /// the argmax of each pooling window. Equal patterns at two inputs mean
    /// the recorded function is smooth between them along the same branch.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from a scalar `loss`. Every tracked leaf gets a gradient
    /// (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        leaf_grads.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                if node.tracked {
                    leaf_grads[i] = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    });
                }
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let d = grad_buf(grads, v, g.len());
                        for (d, &gi) in d.iter_mut().zip(g) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let o = self.value(other).data();
                        let d = grad_buf(grads, v, g.len());
                        for ((d, &gi), &ov) in d.iter_mut().zip(g).zip(o) {
                            *d = *d + gi * ov;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = grad_buf(grads, *a, g.len());
                for ((d, &gi), &xv) in d.iter_mut().zip(g).zip(x) {
                    if xv > T::zero() {
                        *d = *d + gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = grad_buf(grads, *a, g.len());
                for ((d, &gi), &yv) in d.iter_mut().zip(g).zip(y) {
                    *d = *d + gi * yv * (T::one() - yv);
                }
            }
            Op::Scale(a, s) => {
                let d = grad_buf(grads, *a, g.len());
                for (d, &gi) in d.iter_mut().zip(g) {
                    *d = *d + gi * *s;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let d = grad_buf(grads, *a, g.len());
                for (d, &gi) in d.iter_mut().zip(g) {
                    *d = *d + gi;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let d = grad_buf(grads, *a, m * k);
                    gemm(m, p, k, MatRef::n(g), MatRef::t(bv), T::one(), d);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let d = grad_buf(grads, *b, k * p);
                    gemm(k, m, p, MatRef::t(av), MatRef::n(g), T::one(), d);
                }
            }
            Op::AddBias(a, bias) => {
                let k = self.shape(*bias)[0];
                if self.needs(*a) {
                    let d = grad_buf(grads, *a, g.len());
                    for (d, &gi) in d.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.needs(*bias) {
                    let d = grad_buf(grads, *bias, k);
                    for row in g.chunks(k) {
                        for (d, &gi) in d.iter_mut().zip(row) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                if self.needs(*w) || self.needs(*bias) {
                    let mut dw = vec![T::zero(); self.value(*w).numel()];
                    let mut db = vec![T::zero(); geom.c_out];
                    kernels::conv2d_backward_params(g, cols, geom, &mut dw, &mut db);
                    for (v, src) in [(*w, dw), (*bias, db)] {
                        if self.needs(v) {
                            let d = grad_buf(grads, v, src.len());
                            for (d, s) in d.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let d = grad_buf(grads, *x, geom.batch * geom.in_sample_len());
                    kernels::conv2d_backward_input(g, wv, geom, d);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let len = self.value(*x).numel();
                let d = grad_buf(grads, *x, len);
                for (&gi, &idx) in g.iter().zip(argmax) {
                    d[idx] = d[idx] + gi;
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                let d = grad_buf(grads, *a, g.len());
                for ((drow, grow), yrow) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let mut gsum = T::zero();
                    for &gi in grow {
                        gsum = gsum + gi;
                    }
                    for ((d, &gi), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + gi - yv.exp() * gsum;
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).numel();
                let d = grad_buf(grads, *a, len);
                for d in d.iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                let d = grad_buf(grads, *x, outer * len * inner);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &gi) in dst.iter_mut().zip(src) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::TransposeLast2 { x, batch, rows, cols } => {
                let d = grad_buf(grads, *x, batch * rows * cols);
                for b in 0..*batch {
                    let base = b * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[base + r * cols + c] = d[base + r * cols + c] + g[base + c * rows + r];
                        }
                    }
                }
            }
            Op::Select {
                x,
                outer,
                len,
                inner,
                index,
            } => {
                let d = grad_buf(grads, *x, outer * len * inner);
                for o in 0..*outer {
                    let dst = &mut d[(o * len + index) * inner..(o * len + index + 1) * inner];
                    for (d, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = *d + gi;
                    }
                }
            }
            Op::PickMean { x, labels } => {
                let s = self.shape(*x);
                let k = s[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap_or_else(T::one);
                let d = grad_buf(grads, *x, s[0] * k);
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] + scale;
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
