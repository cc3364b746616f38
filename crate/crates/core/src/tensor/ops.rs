//! Arithmetic on tensors: elementwise kernels with broadcasting, matrix
//! multiplication, reductions, and the shape adjoints.

use super::{DType, Result, Shape, Storage, Tensor, TensorError};

/// Binary elementwise operator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

/// Reduction operator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceOp {
    Sum,
    Max,
}

trait Float:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
{
    const ZERO: Self;
    const NEG_INF: Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

impl Float for f32 {
    const ZERO: f32 = 0.0;
    const NEG_INF: f32 = f32::NEG_INFINITY;
    fn maximum(self, other: f32) -> f32 {
        self.max(other)
    }
    fn minimum(self, other: f32) -> f32 {
        self.min(other)
    }
}

impl Float for f64 {
    const ZERO: f64 = 0.0;
    const NEG_INF: f64 = f64::NEG_INFINITY;
    fn maximum(self, other: f64) -> f64 {
        self.max(other)
    }
    fn minimum(self, other: f64) -> f64 {
        self.min(other)
    }
}

/// Strides of `shape` as seen through broadcasting to `out`: stretched axes
/// get stride 0, missing leading axes too.
pub(crate) fn broadcast_strides(shape: &Shape, out: &Shape) -> Vec<usize> {
    let strides = shape.strides();
    let mut bs = vec![0; out.rank()];
    let offset = out.rank() - shape.rank();
    for i in 0..shape.rank() {
        if shape.dims()[i] != 1 {
            bs[offset + i] = strides[i];
        }
    }
    bs
}

/// Walk all multi-indices of `shape` in row-major order, yielding for each
/// step the flat offsets into buffers described by `strides` (one per input).
pub(crate) fn for_each_offset(shape: &Shape, strides: &[Vec<usize>], mut f: impl FnMut(usize, &[usize])) {
    let rank = shape.rank();
    let len = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offsets = vec![0usize; strides.len()];
    for flat in 0..len {
        f(flat, &offsets);
        // odometer increment
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            for (o, s) in offsets.iter_mut().zip(strides) {
                *o += s[axis];
            }
            if idx[axis] < shape.dims()[axis] {
                break;
            }
            for (o, s) in offsets.iter_mut().zip(strides) {
                *o -= s[axis] * shape.dims()[axis];
            }
            idx[axis] = 0;
        }
    }
}

fn apply_ewise<T: Float>(op: EwiseOp, a: T, b: T) -> T {
    match op {
        EwiseOp::Add => a + b,
        EwiseOp::Sub => a - b,
        EwiseOp::Mul => a * b,
        EwiseOp::Div => a / b,
        EwiseOp::Max => a.maximum(b),
        EwiseOp::Min => a.minimum(b),
    }
}

fn ewise_typed<T: Float>(op: EwiseOp, a: &[T], b: &[T], shape: &Shape, sa: Vec<usize>, sb: Vec<usize>) -> Vec<T> {
    let mut out = Vec::with_capacity(shape.len());
    for_each_offset(shape, &[sa, sb], |_, offs| {
        out.push(apply_ewise(op, a[offs[0]], b[offs[1]]));
    });
    out
}

/// Elementwise binary operation with right-aligned broadcasting.
pub fn ewise(op: EwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = Shape::broadcast(a.shape(), b.shape())?;
    let dtype = DType::promote(a.dtype(), b.dtype());
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let data = match dtype {
        DType::F32 => {
            let (Storage::F32(va), Storage::F32(vb)) = (&a.buf.data, &b.buf.data) else {
                unreachable!("promotion to f32 implies both inputs are f32")
            };
            Storage::F32(ewise_typed(op, va, vb, &shape, sa, sb))
        }
        DType::F64 => {
            let a64 = a.cast(DType::F64);
            let b64 = b.cast(DType::F64);
            let (Storage::F64(va), Storage::F64(vb)) = (&a64.buf.data, &b64.buf.data) else {
                unreachable!()
            };
            Storage::F64(ewise_typed(op, va, vb, &shape, sa, sb))
        }
    };
    Tensor::from_storage(shape, data)
}

fn matmul_typed<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] = dst[j] + aip * row[j];
            }
        }
    }
    out
}

/// Matrix product of a (m,k) and b (k,n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().rank() != 2 || b.shape().rank() != 2 {
        return Err(TensorError::MatmulRank(a.shape().clone(), b.shape().clone()));
    }
    let (m, k) = (a.shape().dims()[0], a.shape().dims()[1]);
    let (k2, n) = (b.shape().dims()[0], b.shape().dims()[1]);
    if k != k2 {
        return Err(TensorError::MatmulInner(a.shape().clone(), b.shape().clone()));
    }
    let dtype = DType::promote(a.dtype(), b.dtype());
    let shape = Shape::new(vec![m, n]);
    let data = match dtype {
        DType::F32 => {
            let (Storage::F32(va), Storage::F32(vb)) = (&a.buf.data, &b.buf.data) else {
                unreachable!()
            };
            Storage::F32(matmul_typed(va, vb, m, k, n))
        }
        DType::F64 => {
            let a64 = a.cast(DType::F64);
            let b64 = b.cast(DType::F64);
            let (Storage::F64(va), Storage::F64(vb)) = (&a64.buf.data, &b64.buf.data) else {
                unreachable!()
            };
            Storage::F64(matmul_typed(va, vb, m, k, n))
        }
    };
    Tensor::from_storage(shape, data)
}

fn validate_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(TensorError::DuplicateAxis(w[0]));
        }
    }
    for &axis in &sorted {
        if axis >= rank {
            return Err(TensorError::BadAxis { axis, rank });
        }
    }
    Ok(sorted)
}

fn reduced_shape(shape: &Shape, axes: &[usize], keepdims: bool) -> Shape {
    let mut dims = Vec::new();
    for (i, &d) in shape.dims().iter().enumerate() {
        if axes.contains(&i) {
            if keepdims {
                dims.push(1);
            }
        } else {
            dims.push(d);
        }
    }
    Shape::new(dims)
}

fn reduce_typed<T: Float>(op: ReduceOp, v: &[T], shape: &Shape, out_shape_kept: &Shape) -> Vec<T> {
    let identity = match op {
        ReduceOp::Sum => T::ZERO,
        ReduceOp::Max => T::NEG_INF,
    };
    let mut out = vec![identity; out_shape_kept.len()];
    // Offsets into the keepdims-shaped output: reduced axes have stride 0.
    let out_strides = broadcast_strides(out_shape_kept, shape);
    for_each_offset(shape, &[out_strides], |flat, offs| {
        let dst = &mut out[offs[0]];
        *dst = match op {
            ReduceOp::Sum => *dst + v[flat],
            ReduceOp::Max => dst.maximum(v[flat]),
        };
    });
    out
}

/// Fold along `axes` (all axes when empty slice is passed via `reduce_all`).
pub fn reduce(op: ReduceOp, a: &Tensor, axes: &[usize], keepdims: bool) -> Result<Tensor> {
    let axes = validate_axes(axes, a.shape().rank())?;
    let kept = reduced_shape(a.shape(), &axes, true);
    let out_shape = reduced_shape(a.shape(), &axes, keepdims);
    let data = match &a.buf.data {
        Storage::F32(v) => Storage::F32(reduce_typed(op, v, a.shape(), &kept)),
        Storage::F64(v) => Storage::F64(reduce_typed(op, v, a.shape(), &kept)),
    };
    Tensor::from_storage(out_shape, data)
}

/// Fold all axes down to a scalar.
pub fn reduce_all(op: ReduceOp, a: &Tensor) -> Tensor {
    let axes: Vec<usize> = (0..a.shape().rank()).collect();
    reduce(op, a, &axes, false).expect("full-axis reduction cannot fail")
}

/// Reverse all axes (matrix transpose for rank 2). Materializes a copy.
pub fn transpose(a: &Tensor) -> Tensor {
    let rank = a.shape().rank();
    if rank <= 1 {
        return a.clone();
    }
    let mut dims = a.shape().dims().to_vec();
    dims.reverse();
    let out_shape = Shape::new(dims);
    let mut src_strides = a.shape().strides();
    src_strides.reverse();
    let data = match &a.buf.data {
        Storage::F32(v) => {
            let mut out = Vec::with_capacity(v.len());
            for_each_offset(&out_shape, std::slice::from_ref(&src_strides), |_, offs| out.push(v[offs[0]]));
            Storage::F32(out)
        }
        Storage::F64(v) => {
            let mut out = Vec::with_capacity(v.len());
            for_each_offset(&out_shape, std::slice::from_ref(&src_strides), |_, offs| out.push(v[offs[0]]));
            Storage::F64(out)
        }
    };
    Tensor::from_storage(out_shape, data).unwrap()
}

/// Reinterpret with a new shape of equal element count. Shares the buffer.
pub fn reshape(a: &Tensor, shape: impl Into<Shape>) -> Result<Tensor> {
    let shape = shape.into();
    let len = shape.checked_len().ok_or_else(|| TensorError::Overflow(shape.clone()))?;
    if len != a.len() {
        return Err(TensorError::Reshape(a.shape().clone(), a.len(), shape, len));
    }
    Ok(a.with_shape(shape))
}

/// Materialize `a` stretched to `shape`.
pub fn broadcast_to(a: &Tensor, shape: impl Into<Shape>) -> Result<Tensor> {
    let shape = shape.into();
    if !a.shape().broadcastable_to(&shape) {
        return Err(TensorError::BroadcastTo(a.shape().clone(), shape));
    }
    let strides = broadcast_strides(a.shape(), &shape);
    let data = match &a.buf.data {
        Storage::F32(v) => {
            let mut out = Vec::with_capacity(shape.len());
            for_each_offset(&shape, std::slice::from_ref(&strides), |_, offs| out.push(v[offs[0]]));
            Storage::F32(out)
        }
        Storage::F64(v) => {
            let mut out = Vec::with_capacity(shape.len());
            for_each_offset(&shape, std::slice::from_ref(&strides), |_, offs| out.push(v[offs[0]]));
            Storage::F64(out)
        }
    };
    Tensor::from_storage(shape, data)
}

/// Adjoint of [`broadcast_to`]: sums over the axes broadcasting would stretch
/// so the result has shape `shape`.
pub fn sum_to(a: &Tensor, shape: impl Into<Shape>) -> Result<Tensor> {
    let shape = shape.into();
    if a.shape() == &shape {
        return Ok(a.clone());
    }
    if !shape.broadcastable_to(a.shape()) {
        return Err(TensorError::SumTo(a.shape().clone(), shape));
    }
    let lead = a.shape().rank() - shape.rank();
    let mut axes: Vec<usize> = (0..lead).collect();
    for (i, &d) in shape.dims().iter().enumerate() {
        if d == 1 && a.shape().dims()[lead + i] != 1 {
            axes.push(lead + i);
        }
    }
    let summed = reduce(ReduceOp::Sum, a, &axes, true)?;
    reshape(&summed, shape)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        ewise(EwiseOp::Add, self, other)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        ewise(EwiseOp::Sub, self, other)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        ewise(EwiseOp::Mul, self, other)
    }
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        ewise(EwiseOp::Div, self, other)
    }
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
    pub fn transpose(&self) -> Tensor {
        transpose(self)
    }
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        reshape(self, shape)
    }
    pub fn broadcast_to(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        broadcast_to(self, shape)
    }
    pub fn sum_to(&self, shape: impl Into<Shape>) -> Result<Tensor> {
        sum_to(self, shape)
    }
    pub fn sum_all(&self) -> f64 {
        reduce_all(ReduceOp::Sum, self).item()
    }
    /// Elementwise map into a fresh tensor of the same dtype.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = match &self.buf.data {
            Storage::F32(v) => Storage::F32(v.iter().map(|&x| f(x as f64) as f32).collect()),
            Storage::F64(v) => Storage::F64(v.iter().map(|&x| f(x)).collect()),
        };
        Tensor::from_storage(self.shape.clone(), data).unwrap()
    }
    /// Multiply every element by a host scalar.
    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }
}
