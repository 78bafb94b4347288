//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every executed operation; [`Tape::backward`] walks the
//! record once in reverse and accumulates gradients into the `requires_grad`
//! leaves. The operator set is exactly what the network needs: `conv2d`
//! (3x3-style same-padding cross-correlation), `dense`, the pointwise
//! activations, channel concat, 2x2 max-pooling, global average pooling, and
//! the scalar reductions the losses are built from.
//!
//! Training runs in `f32`; gradient checks instantiate the same graph in
//! `f64` (see [`gradcheck`]).

pub mod checkpoint;
pub mod gradcheck;
mod simd;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("log of non-positive value")]
    LogDomain,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Float element: the engine is generic so training runs in f32 while
/// gradient checks run the identical graph in f64.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
    /// dst += a * src with a fixed accumulation order.
    fn axpy(dst: &mut [Self], a: Self, src: &[Self]) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *d + a * *s;
        }
    }
    /// Dot product with a fixed accumulation order.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        let mut acc = Self::ZERO;
        for (x, y) in a.iter().zip(b) {
            acc = acc + *x * *y;
        }
        acc
    }
    /// C[m,n] += A[m,k] * B[k,n], all row-major.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        for i in 0..m {
            for kk in 0..k {
                let av = a[i * k + kk];
                if av != Self::ZERO {
                    let brow = &b[kk * n..(kk + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv = *cv + av * *bv;
                    }
                }
            }
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn maxv(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f32::min(self, o)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn axpy(dst: &mut [Self], a: Self, src: &[Self]) {
        simd::axpy_f32(dst, a, src);
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        simd::dot_f32(a, b)
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        simd::gemm_f32(m, k, n, a, b, c);
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn maxv(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f64::min(self, o)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Plain tensor storage living outside any tape (model parameters,
/// optimizer state, batch buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![T::ZERO; n],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape: shape.to_vec(),
            values,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: ValueId, w: ValueId, b: ValueId },
    Dense { x: ValueId, w: ValueId, b: ValueId },
    Relu(ValueId),
    Sigmoid(ValueId),
    Abs(ValueId),
    Exp(ValueId),
    Log(ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, T),
    Clamp { x: ValueId, lo: T, hi: T },
    ConcatC(ValueId, ValueId),
    MaxPool2 { x: ValueId, argmax: Vec<u32> },
    GlobalAvgPool(ValueId),
    SumAll(ValueId),
}

/// A tensor participating in the tape: shape-tagged dense values plus an
/// optional gradient accumulator of the same shape.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Backward visits each node exactly
/// once, in reverse execution order.
pub struct Tape<T> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(shape: &[usize], op: &'static str) -> Result<[usize; 4], AutogradError> {
    if shape.len() != 4 {
        return Err(AutogradError::ShapeMismatch {
            op,
            detail: format!("expected 4-d NCHW tensor, got {shape:?}"),
        });
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op<T>) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, data: TensorData<T>, requires_grad: bool) -> ValueId {
        self.push(data.shape, data.values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: TensorData<T>) -> ValueId {
        self.leaf(data, false)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: ValueId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Drop accumulated gradients on every leaf.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, id: ValueId) -> T {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    // -- elementwise ------------------------------------------------------

    fn binary_same_shape(
        &mut self,
        a: ValueId,
        b: ValueId,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<ValueId, AutogradError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AutogradError::ShapeMismatch {
                op: op_name,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), values, rg, op))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutogradError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutogradError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutogradError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: ValueId, f: impl Fn(T) -> T, op: Op<T>) -> ValueId {
        let values = self.nodes[x.0].values.iter().map(|&v| f(v)).collect();
        let rg = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), values, rg, op)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.unary(x, |v| v.maxv(T::ZERO), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.unary(
            x,
            |v| T::ONE / (T::ONE + (-v).exp()),
            Op::Sigmoid(x),
        )
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: ValueId) -> Result<ValueId, AutogradError> {
        if self.nodes[x.0].values.iter().any(|v| *v <= T::ZERO) {
            return Err(AutogradError::LogDomain);
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn scale(&mut self, x: ValueId, c: T) -> ValueId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn clamp(&mut self, x: ValueId, lo: T, hi: T) -> ValueId {
        self.unary(x, |v| v.maxv(lo).minv(hi), Op::Clamp { x, lo, hi })
    }

    // -- structure --------------------------------------------------------

    /// Concatenate along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, AutogradError> {
        let [na, ca, ha, wa] = shape4(&self.nodes[a.0].shape, "concat")?;
        let [nb, cb, hb, wb] = shape4(&self.nodes[b.0].shape, "concat")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(AutogradError::ShapeMismatch {
                op: "concat",
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        let hw = ha * wa;
        let mut values = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            values.extend_from_slice(
                &self.nodes[a.0].values[n * ca * hw..(n + 1) * ca * hw],
            );
            values.extend_from_slice(
                &self.nodes[b.0].values[n * cb * hw..(n + 1) * cb * hw],
            );
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![na, ca + cb, ha, wa], values, rg, Op::ConcatC(a, b)))
    }

    /// 2x2 max pooling with stride 2 (spatial dims must be even).
    pub fn maxpool2(&mut self, x: ValueId) -> Result<ValueId, AutogradError> {
        let [n, c, h, w] = shape4(&self.nodes[x.0].shape, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutogradError::ShapeMismatch {
                op: "maxpool2",
                detail: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].values;
        let mut values = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for img in 0..n * c {
            let base = img * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = xv[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > best {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                    values.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], values, rg, Op::MaxPool2 { x, argmax }))
    }

    /// Mean over the spatial dims: NCHW -> NC.
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId, AutogradError> {
        let [n, c, h, w] = shape4(&self.nodes[x.0].shape, "global_avg_pool")?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let xv = &self.nodes[x.0].values;
        let mut values = Vec::with_capacity(n * c);
        for img in 0..n * c {
            let mut acc = T::ZERO;
            for &v in &xv[img * hw..(img + 1) * hw] {
                acc = acc + v;
            }
            values.push(acc * inv);
        }
        let rg = self.needs(x);
        Ok(self.push(vec![n, c], values, rg, Op::GlobalAvgPool(x)))
    }

    /// Sum of every element into a scalar.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let mut acc = T::ZERO;
        for &v in &self.nodes[x.0].values {
            acc = acc + v;
        }
        let rg = self.needs(x);
        self.push(vec![1], vec![acc], rg, Op::SumAll(x))
    }

    // -- linear layers ----------------------------------------------------

    /// Same-padding stride-1 conv (cross-correlation plus bias).
    /// `x` is NCHW, `w` is [out, in, k, k] with odd k, `b` is [out].
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, AutogradError> {
        let [n, ci, h, wd] = shape4(&self.nodes[x.0].shape, "conv2d")?;
        let ws = &self.nodes[w.0].shape;
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weights {ws:?} for input channels {ci}"),
            });
        }
        let co = ws[0];
        let k = ws[2];
        if self.nodes[b.0].shape != [co] {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {:?}, expected [{co}]", self.nodes[b.0].shape),
            });
        }
        let hw = h * wd;
        let cikk = ci * k * k;
        let mut values = vec![T::ZERO; n * co * hw];
        let mut col = vec![T::ZERO; cikk * hw];
        for img in 0..n {
            im2col(
                &self.nodes[x.0].values[img * ci * hw..(img + 1) * ci * hw],
                ci,
                h,
                wd,
                k,
                &mut col,
            );
            let out = &mut values[img * co * hw..(img + 1) * co * hw];
            let wv = &self.nodes[w.0].values;
            let bv = &self.nodes[b.0].values;
            for o in 0..co {
                out[o * hw..(o + 1) * hw].fill(bv[o]);
            }
            T::gemm(co, cikk, hw, wv, &col, out);
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, co, h, wd], values, rg, Op::Conv2d { x, w, b }))
    }

    /// Fully connected: x [n, f], w [o, f], b [o] -> [n, o].
    pub fn dense(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, AutogradError> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(AutogradError::ShapeMismatch {
                op: "dense",
                detail: format!("x {xs:?} w {ws:?}"),
            });
        }
        let (n, f) = (xs[0], xs[1]);
        let o = ws[0];
        if self.nodes[b.0].shape != [o] {
            return Err(AutogradError::ShapeMismatch {
                op: "dense",
                detail: format!("bias {:?}, expected [{o}]", self.nodes[b.0].shape),
            });
        }
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = &self.nodes[b.0].values;
        let mut values = Vec::with_capacity(n * o);
        for i in 0..n {
            for j in 0..o {
                values.push(T::dot(&xv[i * f..(i + 1) * f], &wv[j * f..(j + 1) * f]) + bv[j]);
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, o], values, rg, Op::Dense { x, w, b }))
    }

    // -- backward ---------------------------------------------------------

    fn grad_buf(&mut self, id: ValueId) -> &mut Vec<T> {
        let n = &mut self.nodes[id.0];
        if n.grad.is_none() {
            n.grad = Some(vec![T::ZERO; n.values.len()]);
        }
        n.grad.as_mut().unwrap()
    }

    /// Accumulate gradients of a scalar loss into every `requires_grad`
    /// leaf. Interior gradients are recomputed per call; leaf gradients
    /// accumulate additively across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: ValueId) -> Result<(), AutogradError> {
        let numel = self.nodes[loss.0].values.len();
        if numel != 1 {
            return Err(AutogradError::NonScalarLoss { numel });
        }
        // reset interior gradients, keep leaf accumulators
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            let g = self.grad_buf(loss);
            g[0] = g[0] + T::ONE;
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.needs(a) {
                        T::axpy(self.grad_buf(a), T::ONE, &gout);
                    }
                    if self.needs(b) {
                        T::axpy(self.grad_buf(b), T::ONE, &gout);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        T::axpy(self.grad_buf(a), T::ONE, &gout);
                    }
                    if self.needs(b) {
                        T::axpy(self.grad_buf(b), -T::ONE, &gout);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let prod: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[b.0].values)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        T::axpy(self.grad_buf(a), T::ONE, &prod);
                    }
                    if self.needs(b) {
                        let prod: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[a.0].values)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        T::axpy(self.grad_buf(b), T::ONE, &prod);
                    }
                }
                Op::Scale(x, c) => {
                    if self.needs(x) {
                        T::axpy(self.grad_buf(x), c, &gout);
                    }
                }
                Op::Relu(x) => {
                    if self.needs(x) {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                            .collect();
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(x) {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[i].values)
                            .map(|(&g, &y)| g * y * (T::ONE - y))
                            .collect();
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::Abs(x) => {
                    if self.needs(x) {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(&g, &v)| {
                                if v > T::ZERO {
                                    g
                                } else if v < T::ZERO {
                                    -g
                                } else {
                                    T::ZERO
                                }
                            })
                            .collect();
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::Exp(x) => {
                    if self.needs(x) {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[i].values)
                            .map(|(&g, &y)| g * y)
                            .collect();
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::Log(x) => {
                    if self.needs(x) {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(&g, &v)| g / v)
                            .collect();
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if self.needs(x) {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(&g, &v)| if v > lo && v < hi { g } else { T::ZERO })
                            .collect();
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::ConcatC(a, b) => {
                    let [n, ca, h, w] = shape4(&self.nodes[a.0].shape, "concat").unwrap();
                    let cb = self.nodes[b.0].shape[1];
                    let hw = h * w;
                    if self.needs(a) {
                        let mut contrib = vec![T::ZERO; n * ca * hw];
                        for img in 0..n {
                            let src = &gout[img * (ca + cb) * hw..img * (ca + cb) * hw + ca * hw];
                            contrib[img * ca * hw..(img + 1) * ca * hw].copy_from_slice(src);
                        }
                        T::axpy(self.grad_buf(a), T::ONE, &contrib);
                    }
                    if self.needs(b) {
                        let mut contrib = vec![T::ZERO; n * cb * hw];
                        for img in 0..n {
                            let src = &gout
                                [img * (ca + cb) * hw + ca * hw..(img + 1) * (ca + cb) * hw];
                            contrib[img * cb * hw..(img + 1) * cb * hw].copy_from_slice(src);
                        }
                        T::axpy(self.grad_buf(b), T::ONE, &contrib);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.needs(x) {
                        let mut contrib = vec![T::ZERO; self.nodes[x.0].values.len()];
                        for (out_i, &src) in argmax.iter().enumerate() {
                            contrib[src as usize] = contrib[src as usize] + gout[out_i];
                        }
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    if self.needs(x) {
                        let [n, c, h, w] = shape4(&self.nodes[x.0].shape, "gap").unwrap();
                        let hw = h * w;
                        let inv = T::from_f64(1.0 / hw as f64);
                        let mut contrib = vec![T::ZERO; n * c * hw];
                        for img in 0..n * c {
                            let g = gout[img] * inv;
                            for v in &mut contrib[img * hw..(img + 1) * hw] {
                                *v = g;
                            }
                        }
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(x) {
                        let g = gout[0];
                        let ones = vec![g; self.nodes[x.0].values.len()];
                        T::axpy(self.grad_buf(x), T::ONE, &ones);
                    }
                }
                Op::Dense { x, w, b } => {
                    let (n, f) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let o = self.nodes[w.0].shape[0];
                    if self.needs(b) {
                        let mut contrib = vec![T::ZERO; o];
                        for i_n in 0..n {
                            for j in 0..o {
                                contrib[j] = contrib[j] + gout[i_n * o + j];
                            }
                        }
                        T::axpy(self.grad_buf(b), T::ONE, &contrib);
                    }
                    if self.needs(w) {
                        let mut contrib = vec![T::ZERO; o * f];
                        for i_n in 0..n {
                            let xrow = self.nodes[x.0].values[i_n * f..(i_n + 1) * f].to_vec();
                            for j in 0..o {
                                T::axpy(
                                    &mut contrib[j * f..(j + 1) * f],
                                    gout[i_n * o + j],
                                    &xrow,
                                );
                            }
                        }
                        T::axpy(self.grad_buf(w), T::ONE, &contrib);
                    }
                    if self.needs(x) {
                        let mut contrib = vec![T::ZERO; n * f];
                        for i_n in 0..n {
                            for j in 0..o {
                                let wrow = self.nodes[w.0].values[j * f..(j + 1) * f].to_vec();
                                T::axpy(
                                    &mut contrib[i_n * f..(i_n + 1) * f],
                                    gout[i_n * o + j],
                                    &wrow,
                                );
                            }
                        }
                        T::axpy(self.grad_buf(x), T::ONE, &contrib);
                    }
                }
                Op::Conv2d { x, w, b } => {
                    let [n, ci, h, wd] = shape4(&self.nodes[x.0].shape, "conv2d").unwrap();
                    let co = self.nodes[w.0].shape[0];
                    let k = self.nodes[w.0].shape[2];
                    let hw = h * wd;
                    let cikk = ci * k * k;
                    if self.needs(b) {
                        let mut contrib = vec![T::ZERO; co];
                        for img in 0..n {
                            for o in 0..co {
                                let row = &gout[(img * co + o) * hw..(img * co + o + 1) * hw];
                                let mut acc = T::ZERO;
                                for &g in row {
                                    acc = acc + g;
                                }
                                contrib[o] = contrib[o] + acc;
                            }
                        }
                        T::axpy(self.grad_buf(b), T::ONE, &contrib);
                    }
                    let needs_w = self.needs(w);
                    let needs_x = self.needs(x);
                    if needs_w || needs_x {
                        // dW accumulates transposed ([cikk, co]) so both conv
                        // gradients run through the tiled GEMM
                        let mut dwt = vec![T::ZERO; cikk * co];
                        let mut dx = vec![T::ZERO; n * ci * hw];
                        let mut col = vec![T::ZERO; cikk * hw];
                        let mut dcol = vec![T::ZERO; cikk * hw];
                        let mut dyt = vec![T::ZERO; hw * co];
                        // transposed weights for the input-gradient GEMM
                        let wt: Vec<T> = if needs_x {
                            let wv = &self.nodes[w.0].values;
                            let mut wt = vec![T::ZERO; cikk * co];
                            for o in 0..co {
                                for ki in 0..cikk {
                                    wt[ki * co + o] = wv[o * cikk + ki];
                                }
                            }
                            wt
                        } else {
                            Vec::new()
                        };
                        for img in 0..n {
                            let dy_img = &gout[img * co * hw..(img + 1) * co * hw];
                            if needs_w {
                                im2col(
                                    &self.nodes[x.0].values[img * ci * hw..(img + 1) * ci * hw],
                                    ci,
                                    h,
                                    wd,
                                    k,
                                    &mut col,
                                );
                                for o in 0..co {
                                    for p in 0..hw {
                                        dyt[p * co + o] = dy_img[o * hw + p];
                                    }
                                }
                                T::gemm(cikk, hw, co, &col, &dyt, &mut dwt);
                            }
                            if needs_x {
                                dcol.fill(T::ZERO);
                                T::gemm(cikk, co, hw, &wt, dy_img, &mut dcol);
                                col2im_add(
                                    &dcol,
                                    ci,
                                    h,
                                    wd,
                                    k,
                                    &mut dx[img * ci * hw..(img + 1) * ci * hw],
                                );
                            }
                        }
                        if needs_w {
                            let g = self.grad_buf(w);
                            for o in 0..co {
                                for ki in 0..cikk {
                                    g[o * cikk + ki] = g[o * cikk + ki] + dwt[ki * co + o];
                                }
                            }
                        }
                        if needs_x {
                            T::axpy(self.grad_buf(x), T::ONE, &dx);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Unfold one image (ci x h x w) into a [ci*k*k, h*w] column matrix with
/// zero padding of (k-1)/2 on each side. Interior spans are bulk copies.
fn im2col<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    debug_assert_eq!(col.len(), ci * k * k * hw);
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dx in 0..k {
                let ki = (c * k + dy) * k + dx;
                let row = &mut col[ki * hw..(ki + 1) * hw];
                let oy = dy as i64 - pad as i64;
                let ox = dx as i64 - pad as i64;
                // valid destination x range for this tap offset
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as i64 - ox).clamp(0, w as i64) as usize;
                for y in 0..h {
                    let sy = y as i64 + oy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as i64 || x_lo >= x_hi {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x_lo].fill(T::ZERO);
                    dst[x_hi..].fill(T::ZERO);
                    let s_lo = (x_lo as i64 + ox) as usize;
                    let s_hi = (x_hi as i64 + ox) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src_row[s_lo..s_hi]);
                }
            }
        }
    }
}

/// Fold a column-gradient matrix back onto the image (segment adds).
fn col2im_add<T: Scalar>(dcol: &[T], ci: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for dy in 0..k {
            for dxo in 0..k {
                let ki = (c * k + dy) * k + dxo;
                let row = &dcol[ki * hw..(ki + 1) * hw];
                let oy = dy as i64 - pad as i64;
                let ox = dxo as i64 - pad as i64;
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as i64 - ox).clamp(0, w as i64) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as i64 + oy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    let src = &row[y * w + x_lo..y * w + x_hi];
                    let s_lo = (x_lo as i64 + ox) as usize;
                    let s_hi = (x_hi as i64 + ox) as usize;
                    let dst = &mut plane[sy as usize * w + s_lo..sy as usize * w + s_hi];
                    T::axpy(dst, T::ONE, src);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

/// ADAM hyperparameters; `Default` is the standard lr=1e-3, β1=0.9,
/// β2=0.999, ε=1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[TensorData<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
        }
    }
}

/// One ADAM update with bias correction. Deterministic.
pub fn adam_step<T: Scalar>(
    params: &mut [TensorData<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    hp: &AdamParams,
) {
    let mut refs: Vec<&mut TensorData<T>> = params.iter_mut().collect();
    adam_step_refs(&mut refs, grads, state, hp);
}

/// [`adam_step`] over borrowed parameter tensors (as produced by a model's
/// parameter traversal).
pub fn adam_step_refs<T: Scalar>(
    params: &mut [&mut TensorData<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    hp: &AdamParams,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let one_m_b1 = T::from_f64(1.0 - hp.beta1);
    let one_m_b2 = T::from_f64(1.0 - hp.beta2);
    let corr1 = T::from_f64(1.0 / (1.0 - hp.beta1.powi(t)));
    let corr2 = T::from_f64(1.0 / (1.0 - hp.beta2.powi(t)));
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.numel(), g.len());
        for i in 0..g.len() {
            m[i] = b1 * m[i] + one_m_b1 * g[i];
            v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
            let mhat = m[i] * corr1;
            let vhat = v[i] * corr2;
            p.values[i] = p.values[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
