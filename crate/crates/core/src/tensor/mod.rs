//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every node of a computation graph. [`Tensor`] is a cheap
//! handle (tape pointer plus node index). Forward values are computed eagerly
//! as ops are applied; [`Tensor::backward`] runs one reverse sweep over the
//! tape and accumulates gradients into every node it reaches.
//!
//! The op set is deliberately small. Everything else in the crate (losses,
//! detection heads) is composed from these primitives, so a finite-difference
//! check of each primitive validates the whole system.

pub mod checkpoint;
pub mod kernels;
pub mod params;
pub mod rng;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone)]
enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Affine { a: usize, scale: T },
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Pow { a: usize, exponent: T },
    Sum(usize),
    Reshape(usize),
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<usize>, axis: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    op: Op<T>,
}

struct TapeInner<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Shared owner of a computation graph. Cloning is cheap (reference count).
pub struct Tape<T: Real = f64> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node on a [`Tape`].
pub struct Tensor<T: Real = f64> {
    id: usize,
    shape: Vec<usize>,
    tape: Tape<T>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { id: self.id, shape: self.shape.clone(), tape: self.tape.clone() }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })) }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Tensor<T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let n = data.len();
        inner.nodes.push(Node { shape: shape.clone(), data, grad: vec![T::zero(); n], op });
        Tensor { id, shape, tape: self.clone() }
    }

    /// Creates an input node. Leaves receive gradients like any other node;
    /// whether anyone reads them is up to the caller.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        if shape.is_empty() || numel(shape) == 0 {
            return Err(Error::invalid("tensor shape must be non-empty"));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor<T>> {
        self.leaf(shape, vec![T::zero(); numel(shape)])
    }

    pub fn full(&self, shape: &[usize], v: T) -> Result<Tensor<T>> {
        self.leaf(shape, vec![v; numel(shape)])
    }
}

impl<T: Real> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Handle to the tape this tensor lives on.
    pub fn tape(&self) -> Tape<T> {
        self.tape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Copies the forward value out of the tape.
    pub fn value(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Copies the accumulated gradient out of the tape.
    pub fn grad(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.tape.inner.borrow().nodes[self.id].data[0]
    }

    fn same_tape(&self, other: &Tensor<T>) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::invalid("operands belong to different tapes"));
        }
        Ok(())
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Tensor<T> {
        let data: Vec<T> = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].data.iter().map(|&v| f(v)).collect()
        };
        self.tape.push(self.shape.clone(), data, op)
    }

    fn binary(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "elementwise op needs matching shapes, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<T> = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[other.id].data;
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.tape.push(self.shape.clone(), data, op))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise `self * scale + shift`.
    pub fn affine(&self, scale: T, shift: T) -> Tensor<T> {
        self.unary(|v| v * scale + shift, Op::Affine { a: self.id, scale })
    }

    /// Composition helper: `self + (-1) * other`.
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.add(&other.affine(-T::one(), T::zero()))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(|v| if v > T::zero() { v } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary(|v| v.ln(), Op::Log(self.id))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|v| v.exp(), Op::Exp(self.id))
    }

    /// Elementwise power with a constant exponent. An exponent of zero yields
    /// a constant one with zero gradient everywhere.
    pub fn powf(&self, exponent: T) -> Tensor<T> {
        self.unary(|v| v.powf(exponent), Op::Pow { a: self.id, exponent })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let total = {
            let inner = self.tape.inner.borrow();
            let mut acc = T::zero();
            for &v in &inner.nodes[self.id].data {
                acc = acc + v;
            }
            acc
        };
        self.tape.push(vec![1], vec![total], Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                numel(shape)
            )));
        }
        let data = self.value();
        Ok(self.tape.push(shape.to_vec(), data, Op::Reshape(self.id)))
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "slice axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) invalid for axis {axis} of shape {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let dim = self.shape[axis];
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner_sz);
        {
            let tape = self.tape.inner.borrow();
            let data = &tape.nodes[self.id].data;
            for o in 0..outer {
                let base = (o * dim + start) * inner_sz;
                out.extend_from_slice(&data[base..base + len * inner_sz]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(self.tape.push(shape, out, Op::Slice { a: self.id, axis, start, len }))
    }

    /// Concatenates tensors along `axis`. All other dimensions must match.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one tensor"))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut axis_total = 0usize;
        for p in parts {
            first.same_tape(p)?;
            if p.shape.len() != rank
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::invalid(format!(
                    "concat shapes {:?} and {:?} differ off axis {axis}",
                    first.shape, p.shape
                )));
            }
            axis_total += p.shape[axis];
        }
        let mut shape = first.shape.clone();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner_sz: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); numel(&shape)];
        {
            let tape = first.tape.inner.borrow();
            let mut off = 0usize;
            for p in parts {
                let dim = p.shape[axis];
                let data = &tape.nodes[p.id].data;
                for o in 0..outer {
                    let src = o * dim * inner_sz;
                    let dst = (o * axis_total + off) * inner_sz;
                    out[dst..dst + dim * inner_sz]
                        .copy_from_slice(&data[src..src + dim * inner_sz]);
                }
                off += dim;
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(shape, out, Op::Concat { parts: ids, axis }))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::invalid(format!(
                "matmul needs [m,k] x [k,n], got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let tape = self.tape.inner.borrow();
            kernels::matmul_forward(
                &tape.nodes[self.id].data,
                &tape.nodes[other.id].data,
                (m, k, n),
                &mut out,
            );
        }
        Ok(self.tape.push(vec![m, n], out, Op::MatMul(self.id, other.id)))
    }

    /// 2D convolution. `self` is NCHW, `weight` is `[out_ch, in_ch, k, k]`,
    /// `bias` (optional) is `[out_ch]`. Square kernels only.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        if self.shape.len() != 4 || weight.shape.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d needs rank-4 input and weight, got {:?} and {:?}",
                self.shape, weight.shape
            )));
        }
        let (n, cin, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (cout, wcin, kh, kw) =
            (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
        if kh != kw {
            return Err(Error::invalid(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::invalid(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        if let Some(b) = bias {
            if b.shape != [cout] {
                return Err(Error::invalid(format!(
                    "conv2d bias shape {:?} does not match {cout} output channels",
                    b.shape
                )));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::invalid(format!(
                "conv2d kernel {kh} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = kernels::conv2d_out_dim(h, kh, stride, pad);
        let wo = kernels::conv2d_out_dim(w, kh, stride, pad);
        let mut out = vec![T::zero(); n * cout * ho * wo];
        {
            let tape = self.tape.inner.borrow();
            let bias_data = bias.map(|b| tape.nodes[b.id].data.as_slice());
            kernels::conv2d_forward(
                &tape.nodes[self.id].data,
                (n, cin, h, w),
                &tape.nodes[weight.id].data,
                (cout, kh),
                bias_data,
                stride,
                pad,
                &mut out,
            );
        }
        Ok(self.tape.push(
            vec![n, cout, ho, wo],
            out,
            Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), stride, pad },
        ))
    }

    /// Max pooling over NCHW with a square window, no padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor<T>> {
        if self.shape.len() != 4 {
            return Err(Error::invalid(format!(
                "max_pool2d needs rank-4 input, got {:?}",
                self.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(Error::invalid(format!(
                "max_pool2d window {kernel}/stride {stride} invalid for {h}x{w} input"
            )));
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        {
            let tape = self.tape.inner.borrow();
            kernels::max_pool2d_forward(
                &tape.nodes[self.id].data,
                (n, c, h, w),
                kernel,
                stride,
                &mut out,
                &mut argmax,
            );
        }
        Ok(self.tape.push(
            vec![n, c, ho, wo],
            out,
            Op::MaxPool2d { x: self.id, argmax },
        ))
    }

    /// Reverse sweep from this (scalar) node. Gradients of every node are
    /// zeroed first, so repeated calls do not accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape
            )));
        }
        let inner = &mut *self.tape.inner.borrow_mut();
        for node in &mut inner.nodes {
            for g in &mut node.grad {
                *g = T::zero();
            }
        }
        inner.nodes[self.id].grad[0] = T::one();
        for i in (0..=self.id).rev() {
            let g = inner.nodes[i].grad.clone();
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let op = inner.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for j in 0..g.len() {
                        inner.nodes[a].grad[j] += g[j];
                        inner.nodes[b].grad[j] += g[j];
                    }
                }
                Op::Mul(a, b) => {
                    for j in 0..g.len() {
                        let av = inner.nodes[a].data[j];
                        let bv = inner.nodes[b].data[j];
                        inner.nodes[a].grad[j] += g[j] * bv;
                        inner.nodes[b].grad[j] += g[j] * av;
                    }
                }
                Op::Affine { a, scale } => {
                    for j in 0..g.len() {
                        inner.nodes[a].grad[j] += g[j] * scale;
                    }
                }
                Op::Relu(a) => {
                    // Subgradient 0 at exactly 0.
                    for j in 0..g.len() {
                        if inner.nodes[a].data[j] > T::zero() {
                            inner.nodes[a].grad[j] += g[j];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for j in 0..g.len() {
                        let y = inner.nodes[i].data[j];
                        inner.nodes[a].grad[j] += g[j] * y * (T::one() - y);
                    }
                }
                Op::Log(a) => {
                    for j in 0..g.len() {
                        let x = inner.nodes[a].data[j];
                        inner.nodes[a].grad[j] += g[j] / x;
                    }
                }
                Op::Exp(a) => {
                    for j in 0..g.len() {
                        let y = inner.nodes[i].data[j];
                        inner.nodes[a].grad[j] += g[j] * y;
                    }
                }
                Op::Pow { a, exponent } => {
                    if exponent != T::zero() {
                        for j in 0..g.len() {
                            let x = inner.nodes[a].data[j];
                            inner.nodes[a].grad[j] += g[j] * exponent * x.powf(exponent - T::one());
                        }
                    }
                }
                Op::Sum(a) => {
                    let go = g[0];
                    for gv in inner.nodes[a].grad.iter_mut() {
                        *gv += go;
                    }
                }
                Op::Reshape(a) => {
                    for j in 0..g.len() {
                        inner.nodes[a].grad[j] += g[j];
                    }
                }
                Op::Slice { a, axis, start, len } => {
                    let in_shape = inner.nodes[a].shape.clone();
                    let outer: usize = in_shape[..axis].iter().product();
                    let dim = in_shape[axis];
                    let inner_sz: usize = in_shape[axis + 1..].iter().product();
                    for o in 0..outer {
                        let src = o * len * inner_sz;
                        let dst = (o * dim + start) * inner_sz;
                        for j in 0..len * inner_sz {
                            inner.nodes[a].grad[dst + j] += g[src + j];
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = inner.nodes[i].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner_sz: usize = out_shape[axis + 1..].iter().product();
                    let axis_total = out_shape[axis];
                    let mut off = 0usize;
                    for p in parts {
                        let dim = inner.nodes[p].shape[axis];
                        for o in 0..outer {
                            let src = (o * axis_total + off) * inner_sz;
                            let dst = o * dim * inner_sz;
                            for j in 0..dim * inner_sz {
                                inner.nodes[p].grad[dst + j] += g[src + j];
                            }
                        }
                        off += dim;
                    }
                }
                Op::MatMul(a, b) => {
                    let ad = inner.nodes[a].data.clone();
                    let bd = inner.nodes[b].data.clone();
                    let m = inner.nodes[a].shape[0];
                    let k = inner.nodes[a].shape[1];
                    let n = inner.nodes[b].shape[1];
                    let mut ga = vec![T::zero(); ad.len()];
                    let mut gb = vec![T::zero(); bd.len()];
                    kernels::matmul_backward(&ad, &bd, (m, k, n), &g, &mut ga, &mut gb);
                    for (dst, src) in inner.nodes[a].grad.iter_mut().zip(&ga) {
                        *dst += *src;
                    }
                    for (dst, src) in inner.nodes[b].grad.iter_mut().zip(&gb) {
                        *dst += *src;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xd = inner.nodes[x].data.clone();
                    let wd = inner.nodes[w].data.clone();
                    let xs = inner.nodes[x].shape.clone();
                    let ws = inner.nodes[w].shape.clone();
                    let mut gx = vec![T::zero(); xd.len()];
                    let mut gw = vec![T::zero(); wd.len()];
                    let mut gb = b.map(|bid| vec![T::zero(); inner.nodes[bid].data.len()]);
                    kernels::conv2d_backward(
                        &xd,
                        (xs[0], xs[1], xs[2], xs[3]),
                        &wd,
                        (ws[0], ws[2]),
                        stride,
                        pad,
                        &g,
                        &mut gx,
                        &mut gw,
                        gb.as_deref_mut(),
                    );
                    for (dst, src) in inner.nodes[x].grad.iter_mut().zip(&gx) {
                        *dst += *src;
                    }
                    for (dst, src) in inner.nodes[w].grad.iter_mut().zip(&gw) {
                        *dst += *src;
                    }
                    if let (Some(bid), Some(gb)) = (b, gb) {
                        for (dst, src) in inner.nodes[bid].grad.iter_mut().zip(&gb) {
                            *dst += *src;
                        }
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    for (j, &src) in argmax.iter().enumerate() {
                        inner.nodes[x].grad[src] += g[j];
                    }
                }
            }
        }
        Ok(())
    }
}
