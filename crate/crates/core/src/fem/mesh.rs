//! Structured bilinear-quad mesh over the rectangular domain.

use super::FemError;
use crate::geom::DomainSpec;

/// Uniform structured grid of 4-node quadrilaterals.
///
/// Nodes are numbered x-major from the bottom-left corner: node `(i, j)` sits
/// at `(i*dx, j*dy)` and has id `j*(nx+1) + i`. Elements are numbered the same
/// way; element `(i, j)` has id `j*nx + i` and counterclockwise connectivity
/// starting at its bottom-left node.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub depth: f64,
    /// Node coordinates in meters, indexed by node id.
    pub coords: Vec<[f64; 2]>,
    /// Element connectivity, counterclockwise.
    pub conn: Vec<[usize; 4]>,
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.width / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.depth / self.ny as f64
    }

    pub fn node_id(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Node ids along the top boundary, left to right.
    pub fn surface_nodes(&self) -> Vec<usize> {
        (0..=self.nx).map(|i| self.node_id(i, self.ny)).collect()
    }
}

pub fn build_mesh(domain: &DomainSpec, nx: usize, ny: usize) -> Result<Mesh, FemError> {
    if nx < 2 || ny < 2 {
        return Err(FemError::InvalidArgument(format!(
            "mesh must be at least 2x2 elements, got {nx}x{ny}"
        )));
    }
    if !(domain.width > 0.0) || !(domain.depth > 0.0) {
        return Err(FemError::InvalidArgument("domain extents must be positive".into()));
    }
    let dx = domain.width / nx as f64;
    let dy = domain.depth / ny as f64;
    let mut coords = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            coords.push([i as f64 * dx, j as f64 * dy]);
        }
    }
    let mut conn = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let n0 = j * (nx + 1) + i;
            conn.push([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1]);
        }
    }
    Ok(Mesh { nx, ny, width: domain.width, depth: domain.depth, coords, conn })
}
