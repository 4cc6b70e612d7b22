//! Ground-truth finite element oracle.
//!
//! Solves static heterogeneous plane-strain elasticity and transient Biot
//! consolidation on a structured bilinear-quad mesh, and samples displacement
//! labels on the grids the surrogate models train against.

mod analytic;
mod biot;
mod elasticity;
mod mesh;
mod sampling;
mod sparse;
pub mod verify;

pub use analytic::{
    consolidation_coefficient, constrained_modulus, terzaghi_degree_of_consolidation,
    terzaghi_pressure,
};
pub use biot::{run_transient, run_transient_with, TransientConfig, TransientState};
pub use elasticity::{
    assemble_static, injection_bcs, plane_strain_d, solve_static, solve_static_cg,
    terzaghi_bcs, uniaxial_bcs, BodyForce, BoundaryConditions, DisplacementConstraint,
    FluxSegment, PressureConstraint, Side, StaticSolution, StaticSystem, TractionSegment,
};
pub use mesh::{build_mesh, Mesh};
pub use sampling::{sample_surface, sample_uy_at, sample_uy_grid};
pub use sparse::{BandFactor, CooBuilder, SparseSymmetric};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown material class {0}")]
    UnknownMaterial(u8),
    #[error("element class count {got} does not match mesh element count {want}")]
    ClassCountMismatch { got: usize, want: usize },
    #[error("system is under-constrained: found a null space of dimension {null_dim}")]
    UnderConstrained { null_dim: usize },
    #[error("ill-posed configuration: {0}")]
    IllPosed(String),
    #[error("invalid boundary conditions: {0}")]
    InvalidBcs(String),
    #[error("iterative solve did not converge: residual {residual} after {iters} iterations")]
    NoConvergence { residual: f64, iters: usize },
}
