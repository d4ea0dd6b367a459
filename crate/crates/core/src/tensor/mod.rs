//! Dense tensor values and the reverse-mode differentiation tape.
//!
//! Tensors are immutable, cheaply clonable (shared storage) and safe to read
//! from any thread. All mutation happens by constructing new tensors.

pub mod gradcheck;
pub mod ops;
pub mod tape;

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_contract, Result};

/// Scalar type the engine is instantiated with: `f32` for training, `f64`
/// for gradient checking.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    /// `c = alpha * a @ b + beta * c` for row-major buffers.
    ///
    /// Logical dimensions are `a: m x k`, `b: k x n`, `c: m x n`. When
    /// `ta`/`tb` is set the corresponding buffer holds the transpose of the
    /// logical matrix (so `a` is stored `k x m` row-major).
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }

            fn gemm(
                ta: bool,
                tb: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
                assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
                assert_eq!(c.len(), m * n, "gemm: out buffer length");
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// An immutable dense tensor. Image batches use the `N x C x H x W` layout.
#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        ensure_contract!(
            shape.iter().all(|&d| d > 0),
            "Tensor::new",
            "shape extents must be positive, got {shape:?}"
        );
        let numel: usize = shape.iter().product();
        ensure_contract!(
            numel == data.len(),
            "Tensor::new",
            "shape {shape:?} implies {numel} elements but data has {}",
            data.len()
        );
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::ZERO; numel]),
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new((0..numel).map(|i| f(i)).collect()),
            requires_grad: false,
        }
    }

    /// Normal samples with the given standard deviation, drawn in f64 for a
    /// stream that is identical across element types.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// True when both tensors share the same storage allocation.
    pub fn same_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        ensure_contract!(
            self.numel() == 1,
            "Tensor::item",
            "expected a scalar, got shape {:?}",
            self.shape
        );
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
            requires_grad: false,
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bit-level equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        ensure_contract!(
            self.shape.len() == 2,
            op,
            "expected a rank-2 tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        ensure_contract!(
            self.shape.len() == 4,
            op,
            "expected a rank-4 tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Row `i` of a rank-2 tensor as a new `1 x D` tensor.
    pub fn row(&self, i: usize) -> Result<Self> {
        let (n, d) = self.dims2("Tensor::row")?;
        ensure_contract!(i < n, "Tensor::row", "row {i} out of range for {n} rows");
        Tensor::new(vec![1, d], self.data[i * d..(i + 1) * d].to_vec())
    }

    /// Stacks rank-3 tensors of identical shape into one rank-4 batch.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        ensure_contract!(!items.is_empty(), "Tensor::stack", "empty input list");
        let first = items[0].shape();
        ensure_contract!(
            first.len() == 3,
            "Tensor::stack",
            "expected rank-3 items, got shape {first:?}"
        );
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for item in items {
            ensure_contract!(
                item.shape() == first,
                "Tensor::stack",
                "mismatched item shapes {:?} vs {:?}",
                item.shape(),
                first
            );
            data.extend_from_slice(item.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first);
        Tensor::new(shape, data)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(6).collect();
        write!(
            f,
            "Tensor{{shape: {:?}, data: {:?}{}}}",
            self.shape,
            preview,
            if self.numel() > 6 { ", .." } else { "" }
        )
    }
}
