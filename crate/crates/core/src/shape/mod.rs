//! Meshes (2D polylines, 3D triangle surfaces), their I/O, and correspondence-free
//! current/varifold distances.

mod io;
pub mod metric;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::points::Points;

pub use io::{format_g17, read_shape, read_shape_str, write_shape, write_shape_string};
pub use metric::{
    cell_representation, metric_dist2, metric_dist2_gradient, CellRepresentation, MetricConfig,
    MetricKind, MetricTarget,
};

/// A mesh: vertices plus cells. Cells are segments (index pairs) in 2D and
/// triangles (index triples) in 3D, so the cell arity always equals `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    vertices: Points,
    cells: Arc<Vec<usize>>,
}

impl Shape {
    pub fn new(vertices: Points, cells: Vec<usize>) -> Result<Self> {
        let dim = vertices.dim();
        if dim != 2 && dim != 3 {
            return Err(invalid(format!("shapes must be 2D or 3D, got dimension {dim}")));
        }
        if cells.len() % dim != 0 {
            return Err(invalid("cell index buffer is not a multiple of the cell arity"));
        }
        vertices.check_finite("shape vertices")?;
        let n = vertices.len();
        if let Some(bad) = cells.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("cell index {bad} out of range for {n} vertices")));
        }
        let shape = Self { vertices, cells: Arc::new(cells) };
        let repr = cell_representation(&shape);
        if let Some(c) = repr.normals.iter().position(|nrm| nrm.iter().all(|&v| v == 0.0)) {
            return Err(invalid(format!("cell {c} is degenerate")));
        }
        Ok(shape)
    }

    /// Open polyline through the given 2D points.
    pub fn polyline(points: &[[f64; 2]]) -> Result<Self> {
        let cells = (0..points.len().saturating_sub(1)).flat_map(|i| [i, i + 1]).collect();
        Self::new(Points::from_rows(points), cells)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.vertices.dim()
    }

    #[inline]
    pub fn vertices(&self) -> &Points {
        &self.vertices
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / self.dim()
    }

    pub fn cell(&self, i: usize) -> &[usize] {
        let d = self.dim();
        &self.cells[i * d..(i + 1) * d]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[usize]> {
        self.cells.chunks_exact(self.dim())
    }

    pub fn cell_indices(&self) -> &[usize] {
        &self.cells
    }

    /// Same connectivity, new vertex positions. Positions are not re-validated.
    pub fn with_vertices(&self, vertices: Points) -> Shape {
        debug_assert!(vertices.same_shape(&self.vertices));
        Shape { vertices, cells: Arc::clone(&self.cells) }
    }

    pub fn same_connectivity(&self, other: &Shape) -> bool {
        Arc::ptr_eq(&self.cells, &other.cells) || self.cells == other.cells
    }

    /// Residual dimension used by the noise model: number of cells times ambient dimension.
    pub fn residual_dimension(&self) -> f64 {
        (self.n_cells() * self.dim()) as f64
    }
}
