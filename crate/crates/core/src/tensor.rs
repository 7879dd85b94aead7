//! Dense row-major tensors and the counter-based random number generator
//! every stochastic component draws from.

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("reduction over an empty tensor")]
    Empty,
    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    OutOfBounds { index: Vec<usize>, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Scalar types a [`Tensor`] can hold. `f32` is the training precision,
/// `f64` exists for finite-difference verification.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
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

    fn write_le(self, out: &mut Vec<u8>);
    fn next_down(self) -> Self;
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 converts to every float element")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float element converts to f64")
    }
}

fn check_gemm_bounds<T>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &[T], strides: [isize; 6]) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
        }
    };
    assert!(strides.iter().all(|&s| s >= 0), "negative gemm strides are not supported");
    assert!(a.len() >= extent(m, k, strides[0], strides[1]), "gemm: lhs too short");
    assert!(b.len() >= extent(k, n, strides[2], strides[3]), "gemm: rhs too short");
    assert!(c.len() >= extent(m, n, strides[4], strides[5]), "gemm: output too short");
}

macro_rules! impl_element {
    ($t:ty, $gemm:path, $bytes:expr) => {
        impl Element for $t {
            const BYTES: usize = $bytes;

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
                check_gemm_bounds(m, k, n, a, b, c, [rsa, csa, rsb, csb, rsc, csc]);
                // SAFETY: every access stays inside the slices, checked above.
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

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn next_down(self) -> Self {
                <$t>::next_down(self)
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm, 4);
impl_element!(f64, matrixmultiply::dgemm, 8);

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

impl<'a, T> From<&'a Tensor<T>> for Operand<'a, T> {
    fn from(t: &'a Tensor<T>) -> Self {
        Operand::Tensor(t)
    }
}

impl<T: Element> From<T> for Operand<'_, T> {
    fn from(v: T) -> Self {
        Operand::Scalar(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..PREVIEW])
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() || shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access, reserved for optimizer updates and kernels that
    /// fill a freshly allocated output.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.shape.len() || coords.iter().zip(&self.shape).any(|(c, d)| c >= d) {
            return Err(TensorError::OutOfBounds { index: coords.to_vec(), shape: self.shape.clone() });
        }
        Ok(coords.iter().zip(self.strides()).map(|(c, s)| c * s).sum())
    }

    pub fn coords(&self, flat: usize) -> Result<Vec<usize>> {
        if flat >= self.data.len() {
            return Err(TensorError::OutOfBounds { index: vec![flat], shape: self.shape.clone() });
        }
        let mut rest = flat;
        Ok(self
            .strides()
            .into_iter()
            .map(|s| {
                let c = rest / s;
                rest %= s;
                c
            })
            .collect())
    }

    pub fn get(&self, coords: &[usize]) -> Result<T> {
        self.flat_index(coords).map(|i| self.data[i])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn elementwise<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        let apply = |a: T, b: T| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        };
        match rhs.into() {
            Operand::Scalar(b) => Ok(self.map(|a| apply(a, b))),
            Operand::Tensor(other) => {
                if other.shape != self.shape {
                    return Err(TensorError::ShapeMismatch {
                        left: self.shape.clone(),
                        right: other.shape.clone(),
                    });
                }
                let data = self.data.iter().zip(&other.data).map(|(&a, &b)| apply(a, b)).collect();
                Ok(Self { shape: self.shape.clone(), data })
            }
        }
    }

    pub fn add<'a>(&self, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        self.elementwise(BinaryOp::Add, rhs)
    }

    pub fn sub<'a>(&self, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        self.elementwise(BinaryOp::Sub, rhs)
    }

    pub fn mul<'a>(&self, rhs: impl Into<Operand<'a, T>>) -> Result<Self> {
        self.elementwise(BinaryOp::Mul, rhs)
    }

    pub fn max_scalar(&self, v: T) -> Self {
        self.map(|a| a.max(v))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|a| a.max(lo).min(hi))
    }

    pub fn reduce(&self, op: Reduction) -> Result<T> {
        if self.data.is_empty() {
            return Err(TensorError::Empty);
        }
        Ok(match op {
            Reduction::Sum => self.sum_f64_as(),
            Reduction::Mean => T::from_f64(self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.len() as f64),
            Reduction::Max => self.data.iter().copied().fold(T::neg_infinity(), T::max),
        })
    }

    fn sum_f64_as(&self) -> T {
        T::from_f64(self.data.iter().map(|v| v.as_f64()).sum())
    }

    pub fn sum(&self) -> Result<T> {
        self.reduce(Reduction::Sum)
    }

    pub fn mean(&self) -> Result<T> {
        self.reduce(Reduction::Mean)
    }

    pub fn max(&self) -> Result<T> {
        self.reduce(Reduction::Max)
    }

    pub fn min(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(TensorError::Empty);
        }
        Ok(self.data.iter().copied().fold(T::infinity(), T::min))
    }

    /// Samples every element independently from `[lo, hi)`.
    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: T, hi: T) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(TensorError::InvalidRange { lo: lo.as_f64(), hi: hi.as_f64() });
        }
        let (lo64, hi64) = (lo.as_f64(), hi.as_f64());
        let data = (0..numel(shape))
            .map(|_| {
                let v = T::from_f64(lo64 + (hi64 - lo64) * rng.unit());
                // rounding to a narrower float can land on `hi`
                if v >= hi {
                    hi.next_down()
                } else {
                    v.max(lo)
                }
            })
            .collect();
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect() }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::Empty)?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch { left: first.shape.clone(), right: t.shape.clone() });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// The `i`-th slice along the leading axis.
    pub fn outer(&self, i: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or(TensorError::Empty)?;
        if i >= n {
            return Err(TensorError::OutOfBounds { index: vec![i], shape: self.shape.clone() });
        }
        let inner = self.len() / n;
        Ok(Self { shape: self.shape[1..].to_vec(), data: self.data[i * inner..(i + 1) * inner].to_vec() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let n = numel(shape);
        if bytes.len() != n * T::BYTES {
            return Err(TensorError::InvalidShape { shape: shape.to_vec(), len: bytes.len() / T::BYTES });
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Self { shape: shape.to_vec(), data })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 generator. Child streams are addressed by a path of
/// integers (e.g. epoch, sample index) and never depend on how many draws
/// other streams made.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream identified by `id` under this generator's path.
    pub fn child(&self, id: u64) -> Self {
        Self::with_stream(self.seed, splitmix64(self.stream ^ splitmix64(id.wrapping_add(1))))
    }

    pub fn derive(seed: u64, path: &[u64]) -> Self {
        path.iter().fold(Self::new(seed), |rng, &id| rng.child(id))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
