use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar type of the numeric substrate. Implemented for `f32` and `f64`;
/// width is selected once at model construction.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor. Rank 0 (scalar), 1 (vector) or 2 (matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                primitive: "matrix",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Uniform(lo, hi) initialization, deterministic under the given rng.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Uniform::new(lo, hi);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(dist.sample(rng))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> F {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossless-enough width conversion used by checkpoint loading.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::lit(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn same_shape<F>(a: &Tensor<F>, b: &Tensor<F>) -> bool {
    a.shape == b.shape
}
