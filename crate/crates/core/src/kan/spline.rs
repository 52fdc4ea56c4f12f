//! Uniform B-spline grids and basis evaluation via the Cox–de Boor recursion.
//!
//! The grid covers `[lo, hi]` with `intervals` equal pieces and is extended by
//! `order` knots on each side, so every point of `[lo, hi]` is covered by a
//! full set of `order + 1` non-zero basis functions. The number of basis
//! functions (and spline coefficients per edge) is `intervals + order`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
    pub order: usize,
}

impl Default for SplineGrid {
    fn default() -> Self {
        SplineGrid {
            lo: -1.0,
            hi: 1.0,
            intervals: 5,
            order: 3,
        }
    }
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, intervals: usize, order: usize) -> Result<Self> {
        let grid = SplineGrid {
            lo,
            hi,
            intervals,
            order,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Validation(format!(
                "spline range [{}, {}] must satisfy lo < hi",
                self.lo, self.hi
            )));
        }
        if self.intervals == 0 || self.order == 0 {
            return Err(Error::Validation(
                "spline grid needs at least one interval and order >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    pub fn num_knots(&self) -> usize {
        self.intervals + 2 * self.order + 1
    }

    pub fn num_basis(&self) -> usize {
        self.intervals + self.order
    }

    #[inline]
    pub fn knot(&self, j: usize) -> f64 {
        self.lo + (j as f64 - self.order as f64) * self.step()
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..self.num_knots()).map(|j| self.knot(j)).collect()
    }

    /// Basis values `B_0(x) .. B_{G+k-1}(x)`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut values = vec![0.0; self.num_basis()];
        let mut scratch = Vec::new();
        self.basis_into(x, &mut values, None, &mut scratch);
        values
    }

    /// Basis values and their derivatives with respect to `x`.
    pub fn basis_with_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let mut values = vec![0.0; self.num_basis()];
        let mut deriv = vec![0.0; self.num_basis()];
        let mut scratch = Vec::new();
        self.basis_into(x, &mut values, Some(&mut deriv), &mut scratch);
        (values, deriv)
    }

    /// Allocation-free evaluation used by the KAN primitive. `values` (and
    /// `deriv`, when given) must hold `num_basis()` entries.
    pub fn basis_into(
        &self,
        x: f64,
        values: &mut [f64],
        deriv: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) {
        let k = self.order;
        let n0 = self.intervals + 2 * k;
        scratch.clear();
        scratch.extend((0..n0).map(|j| {
            if self.knot(j) <= x && x < self.knot(j + 1) {
                1.0
            } else {
                0.0
            }
        }));

        let mut deriv = deriv;
        for p in 1..=k {
            let count = n0 - p;
            // On the final level the order-(k-1) values are still in scratch,
            // which is exactly what the derivative formula needs.
            if p == k {
                if let Some(d) = deriv.as_deref_mut() {
                    let kf = k as f64;
                    for i in 0..count {
                        let left = kf / (self.knot(i + k) - self.knot(i));
                        let right = kf / (self.knot(i + k + 1) - self.knot(i + 1));
                        d[i] = left * scratch[i] - right * scratch[i + 1];
                    }
                }
            }
            for i in 0..count {
                let ti = self.knot(i);
                let tip = self.knot(i + p);
                let ti1 = self.knot(i + 1);
                let tip1 = self.knot(i + p + 1);
                scratch[i] =
                    (x - ti) / (tip - ti) * scratch[i] + (tip1 - x) / (tip1 - ti1) * scratch[i + 1];
            }
            scratch.truncate(count);
        }
        values.copy_from_slice(&scratch[..self.num_basis()]);
    }
}
