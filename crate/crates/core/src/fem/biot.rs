//! Transient Biot consolidation with a monolithic backward-Euler step.
//!
//! Unknowns are nodal displacement and pore pressure on the same bilinear
//! mesh (equal order), interleaved per node as (u_x, u_y, p). Total stress
//! splits into effective stress minus pore pressure, and the fluid flux
//! follows Darcy's law q = -(kappa/mu) grad p with incompressible
//! constituents, so the mass balance is div(du/dt) + div q = 0.
//!
//! The discrete step solves the symmetric quasidefinite block system
//!
//! ```text
//! [ K      -Q             ] [u]   [ f                       ]
//! [ -Q^T   -(dt*H + S)    ] [p] = [ -Q^T u_n - S p_n + dt*Fq ]
//! ```
//!
//! where K is the elastic stiffness, Q the coupling, H the Darcy flow matrix,
//! and S the polynomial-pressure-projection stabilization that suppresses the
//! equal-order checkerboard mode. S acts on the pressure increment, so steady
//! states are unaffected and the drained limit matches the static solve.

use nalgebra::{SMatrix, SVector};

use super::elasticity::{
    edge_weights, element_stiffness, grads_at, plane_strain_d, relative_residual, shape_fns,
    side_edges, BoundaryConditions, GAUSS_2X2,
};
use super::mesh::Mesh;
use super::sparse::{BandFactor, CooBuilder};
use super::FemError;
use crate::geom::MaterialRegistry;

/// State after one time step (or the initial condition at index 0).
#[derive(Debug, Clone)]
pub struct TransientState {
    /// Time in seconds.
    pub time: f64,
    /// Interleaved nodal displacements (u_x, u_y) in meters.
    pub u: Vec<f64>,
    /// Nodal pore pressure in Pa.
    pub p: Vec<f64>,
}

/// Knobs beyond the required (dt, n_steps) pair.
#[derive(Debug, Clone)]
pub struct TransientConfig {
    pub dt: f64,
    pub n_steps: usize,
    /// Scales the pressure-projection stabilization tau = coeff / (2 G).
    pub stab_coeff: f64,
    /// Uniform body force in N/m^3, off by default.
    pub body_force: Option<[f64; 2]>,
}

impl TransientConfig {
    pub fn new(dt: f64, n_steps: usize) -> Self {
        Self { dt, n_steps, stab_coeff: 1.0, body_force: None }
    }
}

/// Runs the coupled consolidation problem and returns `n_steps + 1` states,
/// the prescribed zero initial condition first.
pub fn run_transient(
    mesh: &Mesh,
    element_classes: &[u8],
    registry: &MaterialRegistry,
    bcs: &BoundaryConditions,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<TransientState>, FemError> {
    run_transient_with(mesh, element_classes, registry, bcs, &TransientConfig::new(dt, n_steps))
}

pub fn run_transient_with(
    mesh: &Mesh,
    element_classes: &[u8],
    registry: &MaterialRegistry,
    bcs: &BoundaryConditions,
    config: &TransientConfig,
) -> Result<Vec<TransientState>, FemError> {
    if !(config.dt > 0.0) {
        return Err(FemError::InvalidArgument(format!("dt must be positive, got {}", config.dt)));
    }
    if config.n_steps == 0 {
        return Err(FemError::InvalidArgument("n_steps must be at least 1".into()));
    }
    if element_classes.len() != mesh.n_elements() {
        return Err(FemError::ClassCountMismatch {
            got: element_classes.len(),
            want: mesh.n_elements(),
        });
    }
    bcs.validate(mesh)?;

    let n_nodes = mesh.n_nodes();
    let n_dofs = 3 * n_nodes;
    let dt = config.dt;

    let mut a_coo = CooBuilder::new(n_dofs);
    // CSR holding only the -Q^T and -S blocks; multiplying the previous state
    // by it yields the history part of the right-hand side.
    let mut rhs_coo = CooBuilder::new(n_dofs);
    let mut base_rhs = vec![0.0f64; n_dofs];

    for (e, conn) in mesh.conn.iter().enumerate() {
        let class = element_classes[e];
        let mat = registry.get(class).ok_or(FemError::UnknownMaterial(class))?;
        let d = plane_strain_d(mat.youngs_modulus, mat.poisson_ratio);
        let mobility = mat.permeability / mat.fluid_viscosity;
        let shear = mat.youngs_modulus / (2.0 * (1.0 + mat.poisson_ratio));
        let tau = config.stab_coeff / (2.0 * shear);

        let coords = [
            mesh.coords[conn[0]],
            mesh.coords[conn[1]],
            mesh.coords[conn[2]],
            mesh.coords[conn[3]],
        ];
        let k_e = element_stiffness(&coords, &d);

        let mut q_e = SMatrix::<f64, 8, 4>::zeros();
        let mut h_e = SMatrix::<f64, 4, 4>::zeros();
        let mut m_e = SMatrix::<f64, 4, 4>::zeros();
        let mut v_e = SVector::<f64, 4>::zeros();
        let mut area = 0.0;
        for gp in GAUSS_2X2 {
            let (grads, det) = grads_at(&coords, gp[0], gp[1]);
            let n = shape_fns(gp[0], gp[1]);
            for a in 0..4 {
                for b in 0..4 {
                    q_e[(2 * a, b)] += grads[a][0] * n[b] * det;
                    q_e[(2 * a + 1, b)] += grads[a][1] * n[b] * det;
                    h_e[(a, b)] +=
                        mobility * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]) * det;
                    m_e[(a, b)] += n[a] * n[b] * det;
                }
                v_e[a] += n[a] * det;
            }
            area += det;
        }
        // Projection onto element constants: S = tau * (M - v v^T / area).
        let s_e = (m_e - v_e * v_e.transpose() / area) * tau;

        let u_dofs: Vec<usize> = conn
            .iter()
            .flat_map(|&n| [3 * n, 3 * n + 1])
            .collect();
        let p_dofs: Vec<usize> = conn.iter().map(|&n| 3 * n + 2).collect();

        for r in 0..8 {
            for c in 0..8 {
                a_coo.push(u_dofs[r], u_dofs[c], k_e[(r, c)]);
            }
            for c in 0..4 {
                a_coo.push(u_dofs[r], p_dofs[c], -q_e[(r, c)]);
                a_coo.push(p_dofs[c], u_dofs[r], -q_e[(r, c)]);
                rhs_coo.push(p_dofs[c], u_dofs[r], -q_e[(r, c)]);
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                a_coo.push(p_dofs[r], p_dofs[c], -(dt * h_e[(r, c)] + s_e[(r, c)]));
                rhs_coo.push(p_dofs[r], p_dofs[c], -s_e[(r, c)]);
            }
        }
        if let Some(b) = config.body_force {
            for gp in GAUSS_2X2 {
                let (_, det) = grads_at(&coords, gp[0], gp[1]);
                let n = shape_fns(gp[0], gp[1]);
                for a in 0..4 {
                    base_rhs[u_dofs[2 * a]] += n[a] * b[0] * det;
                    base_rhs[u_dofs[2 * a + 1]] += n[a] * b[1] * det;
                }
            }
        }
    }

    for seg in &bcs.tractions {
        for (a, b, pa, pb) in side_edges(mesh, seg.side) {
            if let Some((wa, wb)) = edge_weights(pa, pb, seg.from, seg.to) {
                for k in 0..2 {
                    base_rhs[3 * a + k] += seg.traction[k] * wa;
                    base_rhs[3 * b + k] += seg.traction[k] * wb;
                }
            }
        }
    }
    // Prescribed outward flux enters the negated mass-balance rows with +dt.
    for seg in &bcs.fluxes {
        for (a, b, pa, pb) in side_edges(mesh, seg.side) {
            if let Some((wa, wb)) = edge_weights(pa, pb, seg.from, seg.to) {
                base_rhs[3 * a + 2] += dt * seg.flux * wa;
                base_rhs[3 * b + 2] += dt * seg.flux * wb;
            }
        }
    }

    let mut constraints: Vec<(usize, f64)> = bcs
        .displacement
        .iter()
        .map(|c| (3 * c.node + c.comp, c.value))
        .collect();
    constraints.extend(bcs.pressures.iter().map(|p| (3 * p.node + 2, p.value)));

    let full = a_coo.compress();
    let rhs_op = rhs_coo.compress();
    let (matrix, corr) = full.eliminate_dirichlet(&constraints);
    let factor = match BandFactor::new(&matrix) {
        Ok(f) => f,
        Err(FemError::UnderConstrained { null_dim }) => {
            return Err(FemError::UnderConstrained { null_dim })
        }
        Err(e) => return Err(FemError::IllPosed(format!("factorization failed: {e}"))),
    };

    let mut states = Vec::with_capacity(config.n_steps + 1);
    states.push(TransientState {
        time: 0.0,
        u: vec![0.0; 2 * n_nodes],
        p: vec![0.0; n_nodes],
    });

    let mut x = vec![0.0f64; n_dofs];
    let mut rhs = vec![0.0f64; n_dofs];
    let mut history = vec![0.0f64; n_dofs];
    for step in 1..=config.n_steps {
        rhs_op.matvec(&x, &mut history);
        for i in 0..n_dofs {
            rhs[i] = base_rhs[i] + history[i] - corr[i];
        }
        for &(dof, g) in &constraints {
            rhs[dof] = g;
        }
        x = factor.solve(&rhs);
        let residual = relative_residual(&matrix, &x, &rhs);
        if !residual.is_finite() {
            return Err(FemError::IllPosed(format!("non-finite residual at step {step}")));
        }
        let mut u = vec![0.0; 2 * n_nodes];
        let mut p = vec![0.0; n_nodes];
        for n in 0..n_nodes {
            u[2 * n] = x[3 * n];
            u[2 * n + 1] = x[3 * n + 1];
            p[n] = x[3 * n + 2];
        }
        states.push(TransientState { time: step as f64 * dt, u, p });
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::analytic::{
        consolidation_coefficient, constrained_modulus, terzaghi_degree_of_consolidation,
        terzaghi_pressure,
    };
    use crate::fem::elasticity::{assemble_static, solve_static, terzaghi_bcs, uniaxial_bcs};
    use crate::fem::mesh::build_mesh;
    use crate::geom::{DomainSpec, Material, MaterialRegistry};

    fn column_domain() -> DomainSpec {
        DomainSpec { width: 2.0, depth: 10.0, raster_w: 16, raster_h: 16 }
    }

    fn rock() -> Material {
        *MaterialRegistry::default().get(0).unwrap()
    }

    #[test]
    fn zero_load_stays_identically_zero() {
        let domain = column_domain();
        let mesh = build_mesh(&domain, 2, 8).unwrap();
        let reg = MaterialRegistry::uniform(rock()).unwrap();
        let classes = vec![0u8; mesh.n_elements()];
        let bcs = terzaghi_bcs(&mesh, 0.0);
        let states = run_transient(&mesh, &classes, &reg, &bcs, 1.0, 5).unwrap();
        assert_eq!(states.len(), 6);
        for s in &states {
            assert!(s.u.iter().all(|&v| v == 0.0));
            assert!(s.p.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_time_parameters() {
        let domain = column_domain();
        let mesh = build_mesh(&domain, 2, 4).unwrap();
        let reg = MaterialRegistry::uniform(rock()).unwrap();
        let classes = vec![0u8; mesh.n_elements()];
        let bcs = terzaghi_bcs(&mesh, 1e5);
        assert!(run_transient(&mesh, &classes, &reg, &bcs, 0.0, 5).is_err());
        assert!(run_transient(&mesh, &classes, &reg, &bcs, 1.0, 0).is_err());
    }

    #[test]
    fn drained_limit_matches_static_solution() {
        // Permeability so large the pressure bleeds off within one step.
        let domain = column_domain();
        let mesh = build_mesh(&domain, 2, 10).unwrap();
        let mut mat = rock();
        mat.permeability = 1e-6;
        let reg = MaterialRegistry::uniform(mat).unwrap();
        let classes = vec![0u8; mesh.n_elements()];
        let load = 1e5;
        let states =
            run_transient(&mesh, &classes, &reg, &terzaghi_bcs(&mesh, load), 10.0, 3).unwrap();
        let last = states.last().unwrap();

        let sys = assemble_static(&mesh, &classes, &reg, &uniaxial_bcs(&mesh, load), None).unwrap();
        let static_sol = solve_static(&sys).unwrap();

        let num: f64 = last
            .u
            .iter()
            .zip(&static_sol.u)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = static_sol.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "drained-limit gap {} too large", num / den);
    }

    #[test]
    fn terzaghi_pressure_and_settlement_match_series() {
        let domain = column_domain();
        let ny = 48;
        let mesh = build_mesh(&domain, 2, ny).unwrap();
        let reg = MaterialRegistry::uniform(rock()).unwrap();
        let classes = vec![0u8; mesh.n_elements()];
        let load = 1e5;
        let bcs = terzaghi_bcs(&mesh, load);

        let mat = rock();
        let cv = consolidation_coefficient(&mat);
        let h = domain.depth;
        let t_consolidation = h * h / cv;
        let dt = t_consolidation / 400.0;
        let n_steps = 200; // runs to Tv = 0.5
        let states = run_transient(&mesh, &classes, &reg, &bcs, dt, n_steps).unwrap();

        let m_c = constrained_modulus(mat.youngs_modulus, mat.poisson_ratio);
        for (step, tv) in [(40usize, 0.1f64), (80, 0.2), (200, 0.5)] {
            let state = &states[step];
            // Pressure profile along the x = width/2 node column.
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..=ny {
                let node = mesh.node_id(1, j);
                let z = h - mesh.coords[node][1];
                let exact = load * terzaghi_pressure(z, h, tv, 400);
                let diff = state.p[node] - exact;
                num += diff * diff;
                den += exact * exact;
            }
            let rel = (num / den).sqrt();
            assert!(rel < 0.02, "pressure L2 error {rel} at Tv {tv}");

            // Surface settlement against the degree of consolidation.
            let settle = -state.u[2 * mesh.node_id(1, ny) + 1];
            let exact = load * h / m_c * terzaghi_degree_of_consolidation(tv, 400);
            let rel_s = (settle - exact).abs() / exact;
            assert!(rel_s < 0.02, "settlement error {rel_s} at Tv {tv}");
        }

        // Settlement is monotone non-decreasing at every surface point.
        for k in 1..states.len() {
            for i in 0..=mesh.nx {
                let node = mesh.node_id(i, ny);
                let prev = -states[k - 1].u[2 * node + 1];
                let next = -states[k].u[2 * node + 1];
                assert!(next >= prev - 1e-12, "settlement decreased at step {k}");
            }
        }

        // Discrete maximum principle: pressure bounded by the initial and
        // boundary extremes.
        for s in &states {
            for &p in &s.p {
                assert!(p <= load * 1.01 && p >= -load * 0.01, "pressure {p} out of bounds");
            }
        }
    }
}
