//! Dense n-dimensional arrays with row-major contiguous storage.
//!
//! Tensors are immutable after construction (optimizers mutate parameter
//! buffers in place through [`Tensor::values_mut`], the single sanctioned
//! exception). Cloning a tensor shares its buffer; the global
//! [`registry`] counts unique live buffers, which is what the
//! memory-liveness tests observe.

mod ops;
pub mod registry;
pub mod snapshot;

pub use ops::{broadcast_to, ewise, matmul, reduce, reduce_all, reshape, sum_to, transpose, EwiseOp, ReduceOp};
pub(crate) use ops::{broadcast_strides, for_each_offset};

use std::fmt;
use std::sync::Arc;

use registry::BufferToken;

/// Error type for tensor construction and arithmetic.
#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("element count overflows usize for shape {0}")]
    Overflow(Shape),
    #[error("shapes {0} and {1} are not broadcast-compatible")]
    Broadcast(Shape, Shape),
    #[error("matmul inner dimensions disagree: {0} vs {1}")]
    MatmulInner(Shape, Shape),
    #[error("matmul requires rank-2 operands, got {0} and {1}")]
    MatmulRank(Shape, Shape),
    #[error("axis {axis} invalid for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("duplicate reduction axis {0}")]
    DuplicateAxis(usize),
    #[error("cannot reshape {0} ({1} elements) to {2} ({3} elements)")]
    Reshape(Shape, usize, Shape, usize),
    #[error("cannot broadcast {0} to {1}")]
    BroadcastTo(Shape, Shape),
    #[error("cannot sum {0} down to {1}")]
    SumTo(Shape, Shape),
    #[error("buffer length {0} does not match shape {1}")]
    Length(usize, Shape),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Ordered list of non-negative extents; rank 0 denotes a scalar.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Total element count (1 for a scalar).
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn checked_len(&self) -> Option<usize> {
        self.0.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![0; self.rank()];
        let mut acc = 1;
        for (i, &d) in self.0.iter().enumerate().rev() {
            strides[i] = acc;
            acc *= d;
        }
        strides
    }

    /// Right-aligned broadcast of two shapes; extent-1 axes stretch.
    pub fn broadcast(a: &Shape, b: &Shape) -> Result<Shape> {
        let rank = a.rank().max(b.rank());
        let mut dims = vec![0; rank];
        for (i, dim) in dims.iter_mut().enumerate() {
            let da = a.extent_from_right(rank - 1 - i);
            let db = b.extent_from_right(rank - 1 - i);
            *dim = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(TensorError::Broadcast(a.clone(), b.clone())),
            };
        }
        Ok(Shape(dims))
    }

    /// Extent at `i` axes from the right, treating missing axes as 1.
    fn extent_from_right(&self, i: usize) -> usize {
        if i < self.rank() {
            self.0[self.rank() - 1 - i]
        } else {
            1
        }
    }

    pub fn broadcastable_to(&self, target: &Shape) -> bool {
        if self.rank() > target.rank() {
            return false;
        }
        (0..target.rank()).all(|i| {
            let s = self.extent_from_right(i);
            s == 1 || s == target.extent_from_right(i)
        })
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}", d)?;
        }
        if self.0.len() == 1 {
            write!(f, ",")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<usize>> for Shape {
    fn from(v: Vec<usize>) -> Self {
        Shape(v)
    }
}

impl From<&[usize]> for Shape {
    fn from(v: &[usize]) -> Self {
        Shape(v.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(v: [usize; N]) -> Self {
        Shape(v.to_vec())
    }
}

/// Element type of a tensor buffer. Only floats are supported.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Promotion rule: any mix involving f64 resolves to f64.
    pub fn promote(a: DType, b: DType) -> DType {
        if a == DType::F64 || b == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Tag byte used by the snapshot format and the wire protocol.
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Contiguous row-major numeric storage.
#[derive(Debug)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }
}

/// A registered buffer. The token keeps the registry's live count accurate:
/// it is taken at allocation and released on drop.
#[derive(Debug)]
struct Buf {
    token: BufferToken,
    data: Storage,
}

impl Clone for Buf {
    fn clone(&self) -> Self {
        // A forced copy (copy-on-write through `values_mut`) is a fresh
        // allocation as far as the registry is concerned.
        Buf {
            token: BufferToken::register(),
            data: match &self.data {
                Storage::F32(v) => Storage::F32(v.clone()),
                Storage::F64(v) => Storage::F64(v.clone()),
            },
        }
    }
}

/// Dense n-dimensional array. Clones share the underlying buffer.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    buf: Arc<Buf>,
}

impl Tensor {
    fn from_storage(shape: Shape, data: Storage) -> Result<Tensor> {
        let len = shape.checked_len().ok_or_else(|| TensorError::Overflow(shape.clone()))?;
        if data.len() != len {
            return Err(TensorError::Length(data.len(), shape));
        }
        Ok(Tensor {
            shape,
            buf: Arc::new(Buf {
                token: BufferToken::register(),
                data,
            }),
        })
    }

    /// Allocate a tensor filled with `fill`.
    pub fn full(shape: impl Into<Shape>, dtype: DType, fill: f64) -> Result<Tensor> {
        let shape = shape.into();
        let len = shape.checked_len().ok_or_else(|| TensorError::Overflow(shape.clone()))?;
        let data = match dtype {
            DType::F32 => Storage::F32(vec![fill as f32; len]),
            DType::F64 => Storage::F64(vec![fill; len]),
        };
        Tensor::from_storage(shape, data)
    }

    pub fn zeros(shape: impl Into<Shape>, dtype: DType) -> Tensor {
        Tensor::full(shape, dtype, 0.0).expect("zero fill cannot fail for valid shapes")
    }

    pub fn ones(shape: impl Into<Shape>, dtype: DType) -> Tensor {
        Tensor::full(shape, dtype, 1.0).expect("one fill cannot fail for valid shapes")
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor::zeros(other.shape.clone(), other.dtype())
    }

    pub fn ones_like(other: &Tensor) -> Tensor {
        Tensor::ones(other.shape.clone(), other.dtype())
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_storage(Shape::scalar(), Storage::F64(vec![value])).unwrap()
    }

    pub fn scalar_f32(value: f32) -> Tensor {
        Tensor::from_storage(Shape::scalar(), Storage::F32(vec![value])).unwrap()
    }

    pub fn from_vec(shape: impl Into<Shape>, values: Vec<f64>) -> Result<Tensor> {
        Tensor::from_storage(shape.into(), Storage::F64(values))
    }

    pub fn from_vec_f32(shape: impl Into<Shape>, values: Vec<f32>) -> Result<Tensor> {
        Tensor::from_storage(shape.into(), Storage::F32(values))
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.buf.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unique token of the underlying buffer; shared by clones.
    pub fn buffer_id(&self) -> u64 {
        self.buf.token.id()
    }

    /// True if this handle and `other` share one buffer.
    pub fn same_buffer(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.buf, &other.buf)
    }

    /// Deep copy into a freshly registered buffer.
    pub fn copy(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            buf: Arc::new((*self.buf).clone()),
        }
    }

    /// Cheap rewrap with a different shape sharing the same buffer.
    /// Caller guarantees the element count matches.
    fn with_shape(&self, shape: Shape) -> Tensor {
        debug_assert_eq!(shape.len(), self.len());
        Tensor {
            shape,
            buf: Arc::clone(&self.buf),
        }
    }

    pub fn values(&self) -> SliceRef<'_> {
        match &self.buf.data {
            Storage::F32(v) => SliceRef::F32(v),
            Storage::F64(v) => SliceRef::F64(v),
        }
    }

    /// Mutable access to the buffer. If the buffer is shared this copies it
    /// first, so other holders keep the values they saw.
    pub fn values_mut(&mut self) -> SliceMut<'_> {
        let buf = Arc::make_mut(&mut self.buf);
        match &mut buf.data {
            Storage::F32(v) => SliceMut::F32(v),
            Storage::F64(v) => SliceMut::F64(v),
        }
    }

    /// Element at flat index, widened to f64.
    pub fn get(&self, flat: usize) -> f64 {
        match &self.buf.data {
            Storage::F32(v) => v[flat] as f64,
            Storage::F64(v) => v[flat],
        }
    }

    /// Element at a multi-index, widened to f64.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.rank(), "index rank mismatch");
        let strides = self.shape.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
        self.get(flat)
    }

    /// All elements widened to f64, in row-major order.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.buf.data {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a single-element tensor");
        self.get(0)
    }

    /// Cast to the given dtype; returns a shared handle when it already matches.
    pub fn cast(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.clone();
        }
        let data = match (&self.buf.data, dtype) {
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
            _ => unreachable!(),
        };
        Tensor::from_storage(self.shape.clone(), data).unwrap()
    }

    /// Raw little-endian bytes of the buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.buf.data {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(shape: impl Into<Shape>, dtype: DType, bytes: &[u8]) -> Result<Tensor> {
        let data = match dtype {
            DType::F32 => Storage::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Storage::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::from_storage(shape.into(), data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}, {}>", self.dtype(), self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.to_f64_vec())?;
        }
        Ok(())
    }
}

/// Borrowed view of tensor values, by dtype.
pub enum SliceRef<'a> {
    F32(&'a [f32]),
    F64(&'a [f64]),
}

/// Mutable view of tensor values, by dtype.
pub enum SliceMut<'a> {
    F32(&'a mut [f32]),
    F64(&'a mut [f64]),
}
