//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted N-d array. Operations that
//! touch at least one tensor with `requires_grad` (while gradient recording
//! is enabled) attach a backward rule to their output; [`Tensor::backward`]
//! walks those rules in reverse creation order and accumulates gradients on
//! the leaves.
//!
//! Storage is either `f32` or `f16`. Half-precision tensors are a storage
//! format only: every operation reads them upcast to `f32`, and gradients are
//! always `f32`.

mod autograd;
mod error;
mod gemm;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod parallel;

use std::borrow::Cow;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use half::f16;
use rand::Rng;
use rand_distr::StandardNormal;

pub use autograd::{
    checkpoint, graph_stats, is_grad_enabled, no_grad, reset_graph_stats, GraphStats, NoGradGuard,
};
pub use error::TensorError;
pub(crate) use autograd::GradCtx;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element storage format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    /// Bytes per element on disk.
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F16 => f.write_str("f16"),
        }
    }
}

#[derive(Debug)]
pub(crate) enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F16(v) => v.len(),
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    /// Creation order. Inputs always have smaller ids than outputs, which the
    /// backward pass relies on for its topological order.
    id: u64,
    shape: Vec<usize>,
    storage: Arc<Storage>,
    requires_grad: bool,
    /// False for op outputs, even after their backward record is freed.
    leaf: bool,
    grad: Mutex<Option<Vec<f32>>>,
    op: Mutex<Option<autograd::OpRecord>>,
}

/// Reference-counted tensor handle. Cloning is cheap and shares data.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        storage: Arc<Storage>,
        requires_grad: bool,
        op: Option<autograd::OpRecord>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), storage.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            storage,
            requires_grad,
            leaf: op.is_none(),
            grad: Mutex::new(None),
            op: Mutex::new(op),
        }))
    }

    /// Leaf tensor from `f32` values.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(Storage::F32(data)), false, None))
    }

    /// Leaf tensor from half-precision values.
    pub fn new_f16(data: Vec<f16>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(Storage::F16(data)), false, None))
    }

    /// Internal constructor for op outputs whose element count is known to match.
    pub(crate) fn from_vec_unchecked(data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        Self::from_parts(shape, Arc::new(Storage::F32(data)), false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Self::from_vec_unchecked(vec![value], Vec::new())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::from_vec_unchecked(vec![0.0; numel_of(shape)], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Self::from_vec_unchecked(vec![value; numel_of(shape)], shape.to_vec())
    }

    /// Standard normal samples, drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
        let data = (0..numel_of(shape)).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self::from_vec_unchecked(data, shape.to_vec())
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Tensor {
        let data = (0..numel_of(shape))
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::from_vec_unchecked(data, shape.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.storage.len()
    }

    pub fn dtype(&self) -> DType {
        match &*self.0.storage {
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.leaf
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Values as `f32`; half-precision storage is upcast.
    pub fn data(&self) -> Cow<'_, [f32]> {
        match &*self.0.storage {
            Storage::F32(v) => Cow::Borrowed(v.as_slice()),
            Storage::F16(v) => Cow::Owned(v.iter().map(|x| x.to_f32()).collect()),
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().into_owned()
    }

    /// Raw half-precision payload, if stored as `f16`.
    pub fn f16_data(&self) -> Option<&[f16]> {
        match &*self.0.storage {
            Storage::F16(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape().to_vec() });
        }
        Ok(self.data()[0])
    }

    /// Little-endian payload bytes in the storage dtype.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &*self.0.storage {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Same shape, dtype, and element bits.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape() != other.shape() {
            return false;
        }
        match (&*self.0.storage, &*other.0.storage) {
            (Storage::F32(a), Storage::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Storage::F16(a), Storage::F16(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        let (a, b) = (self.data(), other.data());
        Ok(a.iter().zip(b.iter()).fold(0.0f32, |m, (x, y)| {
            let d = (x - y).abs();
            if d.is_nan() || d > m {
                if d.is_nan() { f32::NAN } else { d }
            } else {
                m
            }
        }))
    }

    pub fn has_non_finite(&self) -> bool {
        self.data().iter().any(|x| !x.is_finite())
    }

    /// New leaf sharing this tensor's data, with the given trainability.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.0.storage.clone(), requires_grad, None)
    }

    /// New non-trainable leaf sharing this tensor's data.
    pub fn detach(&self) -> Tensor {
        self.with_requires_grad(false)
    }

    /// New leaf with storage converted to `dtype`. Keeps `requires_grad`.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.with_requires_grad(self.requires_grad());
        }
        let storage = match dtype {
            DType::F32 => Storage::F32(self.to_vec()),
            DType::F16 => Storage::F16(self.data().iter().map(|&x| f16::from_f32(x)).collect()),
        };
        Self::from_parts(self.0.shape.clone(), Arc::new(storage), self.requires_grad(), None)
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.grad_vec()
            .map(|g| Tensor::from_vec_unchecked(g, self.0.shape.clone()))
    }

    pub fn grad_vec(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Seeds the backward pass with 1 (the tensor must be a scalar).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { shape: self.shape().to_vec() });
        }
        autograd::run_backward(self, vec![1.0])
    }

    /// Backward pass with an explicit upstream gradient of this tensor's shape.
    pub fn backward_with_grad(&self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(TensorError::ElementCount { shape: self.shape().to_vec(), len: grad.len() });
        }
        autograd::run_backward(self, grad)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
