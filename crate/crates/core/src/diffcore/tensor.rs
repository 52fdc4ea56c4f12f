use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Axis selector for operations that act on either of the two inner axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Feature,
}

impl Axis {
    pub(crate) fn index(self) -> usize {
        match self {
            Axis::Channel => 1,
            Axis::Feature => 2,
        }
    }
}

/// Dense batch × channel × feature array of doubles, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor3 {
            dims,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 3], value: f64) -> Self {
        Tensor3 {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
            requires_grad: false,
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for l in 0..dims[2] {
                    data.push(f(b, c, l));
                }
            }
        }
        Tensor3 {
            dims,
            data,
            requires_grad: false,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 3], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_, _, _| rng.random_range(lo..hi))
    }

    pub fn normal<R: Rng + ?Sized>(dims: [usize; 3], std: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_, _, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn features(&self) -> usize {
        self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, l: usize) -> usize {
        (b * self.dims[1] + c) * self.dims[2] + l
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, l: usize) -> f64 {
        self.data[self.offset(b, c, l)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, l: usize, v: f64) {
        let o = self.offset(b, c, l);
        self.data[o] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Reads `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: Axis, start: usize, len: usize) -> Result<Tensor3> {
        let ax = axis.index();
        if start + len > self.dims[ax] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} exceeds axis length {}", start + len, self.dims[ax]),
            ));
        }
        let mut dims = self.dims;
        dims[ax] = len;
        Ok(match axis {
            Axis::Channel => Tensor3::from_fn(dims, |b, c, l| self.at(b, c + start, l)),
            Axis::Feature => Tensor3::from_fn(dims, |b, c, l| self.at(b, c, l + start)),
        })
    }
}
