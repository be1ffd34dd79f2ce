//! Dense 4-D tensors and the reverse-mode differentiation graph.

mod graph;
mod kernels;
mod params;

pub use graph::{Graph, NodeId, Op, OpKind};
pub use params::{Adam, ParamId, ParamStore};

use crate::error::{Error, Result};

/// Element type of the engine. Training runs in `f32`; gradient checks
/// instantiate the same kernels with `f64` because central differences are
/// unreliable in single precision.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn floor(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn floor(self) -> Self {
                <$t>::floor(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// (batch, channels, height, width) of a dense row-major tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of (n, c, y, x).
    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A dense 4-D value buffer. Plain data; graph bookkeeping lives in [`Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != shape {} ({})", data.len(), shape, shape.len()),
            ));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        TensorData {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        TensorData {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        TensorData { shape, data }
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.at(n, c, y, x)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[self.shape.at(n, c, y, x)]
    }

    pub fn scalar_value(&self) -> T {
        self.data[0]
    }

    /// Converts every element, switching precision.
    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
