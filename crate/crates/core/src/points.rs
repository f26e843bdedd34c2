use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A list of points (or vectors) in ambient space, stored as one flat row-major buffer.
///
/// Control points, momenta and mesh vertices all share this representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    coords: Vec<f64>,
}

/// Positions of the control points `c`.
pub type ControlPoints = Points;
/// Momentum vectors `m`, one per control point.
pub type Momenta = Points;

impl Points {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("point dimension must be positive"));
        }
        if coords.len() % dim != 0 {
            return Err(invalid(format!(
                "coordinate buffer of length {} is not a multiple of dimension {dim}",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn zeros(dim: usize, n: usize) -> Self {
        Self { dim, coords: vec![0.0; dim * n] }
    }

    pub fn from_rows<const D: usize>(rows: &[[f64; D]]) -> Self {
        Self { dim: D, coords: rows.iter().flatten().copied().collect() }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Points) -> bool {
        self.dim == other.dim && self.coords.len() == other.coords.len()
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Points) {
        debug_assert!(self.same_shape(x));
        for (s, v) in self.coords.iter_mut().zip(&x.coords) {
            *s += a * v;
        }
    }

    /// Returns `self + a * x` without modifying `self`.
    pub fn plus_scaled(&self, a: f64, x: &Points) -> Points {
        let mut out = self.clone();
        out.axpy(a, x);
        out
    }

    pub fn scaled(&self, a: f64) -> Points {
        Points { dim: self.dim, coords: self.coords.iter().map(|v| a * v).collect() }
    }

    pub fn sub(&self, other: &Points) -> Points {
        self.plus_scaled(-1.0, other)
    }

    /// Euclidean inner product of the flattened buffers.
    pub fn dot(&self, other: &Points) -> f64 {
        self.coords.iter().zip(&other.coords).map(|(a, b)| a * b).sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn translate(&mut self, offset: &[f64]) {
        for p in self.coords.chunks_exact_mut(self.dim) {
            for (x, o) in p.iter_mut().zip(offset) {
                *x += o;
            }
        }
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("{what} contains non-finite coordinates")))
        }
    }
}

#[inline]
pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
