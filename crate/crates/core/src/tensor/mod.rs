//! Rank-4 tensors, the reverse-mode tape, and the Adam optimizer.
//!
//! Every value flowing through the networks is an `(n, c, h, w)` array stored
//! row-major. The engine is generic over [`Real`] so gradient checks can run
//! in `f64` while training runs in `f32`.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{CeTarget, Gradients, NormStats, Tape, Var};

/// Batch-norm epsilon used throughout.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm running update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range for plane of {len} elements")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward: loss must be a scalar, got shape {0}")]
    NotScalar(Shape),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type of the engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with strided row-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: the asserts above bound every strided access inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `(n, c, h, w)` extents.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
    /// Elements per batch sample.
    pub fn sample_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    pub fn with_n(self, n: usize) -> Self {
        Shape([n, self.0[1], self.0[2], self.0[3]])
    }
    pub fn with_c(self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense rank-4 array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                expected: format!("{} elements for {shape}", shape.numel()),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Gaussian entries with the given mean and standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, mean: f64, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(mean + std * z)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Copies batch rows `indices` into a new tensor.
    pub fn gather_samples(&self, indices: &[usize]) -> Self {
        let len = self.shape.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        Tensor {
            shape: self.shape.with_n(indices.len()),
            data,
        }
    }

    /// Stacks same-shaped tensors along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "stack",
            msg: "no tensors to stack".into(),
        })?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_n(1) != first.shape.with_n(1) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    expected: format!("{}", first.shape.with_n(p.shape.n())),
                    got: format!("{}", p.shape),
                });
            }
            n += p.shape.n();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: first.shape.with_n(n),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Per-output argmax positions recorded by max pooling.
///
/// `flat_index[i]` indexes into the `h_in * w_in` plane of the same `(n, c)`
/// slice of the pooled input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    shape: Shape,
    input_hw: (usize, usize),
    flat_index: Vec<u32>,
}

impl PoolIndices {
    pub fn new(shape: Shape, input_hw: (usize, usize), flat_index: Vec<u32>) -> Result<Self> {
        if flat_index.len() != shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "pool_indices",
                expected: format!("{} indices", shape.numel()),
                got: format!("{}", flat_index.len()),
            });
        }
        let plane = input_hw.0 * input_hw.1;
        if let Some(&bad) = flat_index.iter().find(|&&i| i as usize >= plane) {
            return Err(TensorError::IndexOutOfRange {
                op: "pool_indices",
                index: bad as usize,
                len: plane,
            });
        }
        Ok(PoolIndices {
            shape,
            input_hw,
            flat_index,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    /// Spatial size of the feature map the indices were taken from.
    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }
    pub fn flat_index(&self) -> &[u32] {
        &self.flat_index
    }
}
