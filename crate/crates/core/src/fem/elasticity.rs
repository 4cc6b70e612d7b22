//! Static plane-strain elasticity: assembly, boundary conditions, solve.

use nalgebra::{Matrix2, SMatrix};

use super::mesh::Mesh;
use super::sparse::{solve_cg, BandFactor, CooBuilder, SparseSymmetric};
use super::FemError;
use crate::geom::MaterialRegistry;

const GP: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// 2x2 Gauss points on the reference square, unit weights.
pub(crate) const GAUSS_2X2: [[f64; 2]; 4] =
    [[-GP, -GP], [GP, -GP], [GP, GP], [-GP, GP]];

const GP3: f64 = 0.774_596_669_241_483_4; // sqrt(3/5)
const W3A: f64 = 5.0 / 9.0;
const W3B: f64 = 8.0 / 9.0;

/// 3x3 Gauss rule as (xi, eta, weight); used for load integration and error
/// norms where the 2x2 rule would alias.
pub(crate) const GAUSS_3X3: [(f64, f64, f64); 9] = [
    (-GP3, -GP3, W3A * W3A),
    (0.0, -GP3, W3B * W3A),
    (GP3, -GP3, W3A * W3A),
    (-GP3, 0.0, W3A * W3B),
    (0.0, 0.0, W3B * W3B),
    (GP3, 0.0, W3A * W3B),
    (-GP3, GP3, W3A * W3A),
    (0.0, GP3, W3B * W3A),
    (GP3, GP3, W3A * W3A),
];

/// Plane-strain isotropic constitutive matrix (Voigt order xx, yy, xy).
pub fn plane_strain_d(e: f64, nu: f64) -> SMatrix<f64, 3, 3> {
    let f = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
    SMatrix::<f64, 3, 3>::new(
        f * (1.0 - nu),
        f * nu,
        0.0,
        f * nu,
        f * (1.0 - nu),
        0.0,
        0.0,
        0.0,
        f * (1.0 - 2.0 * nu) / 2.0,
    )
}

pub(crate) fn shape_fns(xi: f64, eta: f64) -> [f64; 4] {
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ]
}

pub(crate) fn shape_derivs(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)],
        [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)],
        [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)],
        [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)],
    ]
}

/// Physical shape-function gradients and Jacobian determinant at one Gauss
/// point of a quad element.
pub(crate) fn grads_at(coords: &[[f64; 2]; 4], xi: f64, eta: f64) -> ([[f64; 2]; 4], f64) {
    let dn = shape_derivs(xi, eta);
    let mut jac = Matrix2::<f64>::zeros();
    for a in 0..4 {
        jac[(0, 0)] += dn[a][0] * coords[a][0];
        jac[(0, 1)] += dn[a][0] * coords[a][1];
        jac[(1, 0)] += dn[a][1] * coords[a][0];
        jac[(1, 1)] += dn[a][1] * coords[a][1];
    }
    let det = jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)];
    let inv = Matrix2::new(jac[(1, 1)], -jac[(0, 1)], -jac[(1, 0)], jac[(0, 0)]) / det;
    let mut grads = [[0.0; 2]; 4];
    for a in 0..4 {
        grads[a][0] = inv[(0, 0)] * dn[a][0] + inv[(0, 1)] * dn[a][1];
        grads[a][1] = inv[(1, 0)] * dn[a][0] + inv[(1, 1)] * dn[a][1];
    }
    (grads, det)
}

/// 8x8 bilinear-quad stiffness by 2x2 Gauss quadrature, symmetrized so the
/// assembled matrix is numerically symmetric to the last bit.
pub(crate) fn element_stiffness(coords: &[[f64; 2]; 4], d: &SMatrix<f64, 3, 3>) -> SMatrix<f64, 8, 8> {
    let mut k = SMatrix::<f64, 8, 8>::zeros();
    for gp in GAUSS_2X2 {
        let (grads, det) = grads_at(coords, gp[0], gp[1]);
        let mut b = SMatrix::<f64, 3, 8>::zeros();
        for a in 0..4 {
            b[(0, 2 * a)] = grads[a][0];
            b[(1, 2 * a + 1)] = grads[a][1];
            b[(2, 2 * a)] = grads[a][1];
            b[(2, 2 * a + 1)] = grads[a][0];
        }
        k += b.transpose() * d * b * det;
    }
    (k + k.transpose()) * 0.5
}

/// Boundary side of the rectangular domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

/// Prescribed traction over a parameter interval of one side. The parameter
/// is x for Bottom/Top and y for Left/Right; the vector is in Pa.
#[derive(Debug, Clone, Copy)]
pub struct TractionSegment {
    pub side: Side,
    pub from: f64,
    pub to: f64,
    pub traction: [f64; 2],
}

/// Essential displacement constraint: component `comp` (0 = x, 1 = y) of a
/// node fixed to `value` meters.
#[derive(Debug, Clone, Copy)]
pub struct DisplacementConstraint {
    pub node: usize,
    pub comp: usize,
    pub value: f64,
}

/// Essential pore-pressure constraint in Pa (transient problems only).
#[derive(Debug, Clone, Copy)]
pub struct PressureConstraint {
    pub node: usize,
    pub value: f64,
}

/// Prescribed outward normal fluid flux (m/s) over a side interval.
#[derive(Debug, Clone, Copy)]
pub struct FluxSegment {
    pub side: Side,
    pub from: f64,
    pub to: f64,
    pub flux: f64,
}

/// Full boundary condition set for static or transient problems. The static
/// assembly ignores the pressure fields.
#[derive(Debug, Clone, Default)]
pub struct BoundaryConditions {
    pub displacement: Vec<DisplacementConstraint>,
    pub tractions: Vec<TractionSegment>,
    pub pressures: Vec<PressureConstraint>,
    pub fluxes: Vec<FluxSegment>,
}

impl BoundaryConditions {
    pub fn validate(&self, mesh: &Mesh) -> Result<(), FemError> {
        let n = mesh.n_nodes();
        let mut seen: std::collections::HashMap<(usize, usize), f64> = Default::default();
        for c in &self.displacement {
            if c.node >= n || c.comp > 1 {
                return Err(FemError::InvalidBcs(format!(
                    "displacement constraint on node {} comp {} out of range",
                    c.node, c.comp
                )));
            }
            if let Some(prev) = seen.insert((c.node, c.comp), c.value) {
                if prev != c.value {
                    return Err(FemError::InvalidBcs(format!(
                        "conflicting displacement values on node {} comp {}",
                        c.node, c.comp
                    )));
                }
            }
        }
        let mut pseen: std::collections::HashMap<usize, f64> = Default::default();
        for p in &self.pressures {
            if p.node >= n {
                return Err(FemError::InvalidBcs(format!("pressure node {} out of range", p.node)));
            }
            if let Some(prev) = pseen.insert(p.node, p.value) {
                if prev != p.value {
                    return Err(FemError::InvalidBcs(format!(
                        "conflicting pressure values on node {}",
                        p.node
                    )));
                }
            }
        }
        for seg in &self.tractions {
            if !(seg.from < seg.to) {
                return Err(FemError::InvalidBcs("traction segment has empty extent".into()));
            }
        }
        for seg in &self.fluxes {
            if !(seg.from < seg.to) {
                return Err(FemError::InvalidBcs("flux segment has empty extent".into()));
            }
            // Essential and natural pressure sets must stay disjoint: a node
            // strictly inside a flux segment cannot carry a pressure value.
            for p in &self.pressures {
                let [x, y] = mesh.coords[p.node];
                let (on_side, t) = side_param(mesh, p.node, seg.side, x, y);
                if on_side && t > seg.from && t < seg.to {
                    return Err(FemError::InvalidBcs(format!(
                        "node {} has prescribed pressure inside a flux segment",
                        p.node
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn displacement_dof_constraints(&self) -> Vec<(usize, f64)> {
        self.displacement.iter().map(|c| (2 * c.node + c.comp, c.value)).collect()
    }
}

fn side_param(mesh: &Mesh, _node: usize, side: Side, x: f64, y: f64) -> (bool, f64) {
    let eps = 1e-9 * mesh.width.max(mesh.depth);
    match side {
        Side::Bottom => (y.abs() < eps, x),
        Side::Top => ((y - mesh.depth).abs() < eps, x),
        Side::Left => (x.abs() < eps, y),
        Side::Right => ((x - mesh.width).abs() < eps, y),
    }
}

/// Boundary edges of one side as (node_a, node_b, param_a, param_b) with
/// param_a < param_b.
pub(crate) fn side_edges(mesh: &Mesh, side: Side) -> Vec<(usize, usize, f64, f64)> {
    let mut edges = Vec::new();
    match side {
        Side::Bottom | Side::Top => {
            let j = if side == Side::Bottom { 0 } else { mesh.ny };
            for i in 0..mesh.nx {
                let a = mesh.node_id(i, j);
                let b = mesh.node_id(i + 1, j);
                edges.push((a, b, mesh.coords[a][0], mesh.coords[b][0]));
            }
        }
        Side::Left | Side::Right => {
            let i = if side == Side::Left { 0 } else { mesh.nx };
            for j in 0..mesh.ny {
                let a = mesh.node_id(i, j);
                let b = mesh.node_id(i, j + 1);
                edges.push((a, b, mesh.coords[a][1], mesh.coords[b][1]));
            }
        }
    }
    edges
}

/// Integrates a per-length density `f(param) = constant` times the linear
/// edge shape functions over the clipped interval, returning the (a, b) node
/// weights.
pub(crate) fn edge_weights(pa: f64, pb: f64, from: f64, to: f64) -> Option<(f64, f64)> {
    let len = pb - pa;
    let lo = from.max(pa);
    let hi = to.min(pb);
    if hi <= lo {
        return None;
    }
    let s0 = lo - pa;
    let s1 = hi - pa;
    let int_total = s1 - s0;
    let int_ramp = (s1 * s1 - s0 * s0) / (2.0 * len);
    Some((int_total - int_ramp, int_ramp))
}

/// The default loading scenario: injection-induced pressure modeled as a
/// uniform upward traction on the centered 20% of the bottom boundary.
/// Sides are rollers (u_x = 0), the bottom is a roller (u_y = 0) outside the
/// loaded patch, and the top is drained (p = 0) for transient runs.
pub fn injection_bcs(mesh: &Mesh, magnitude: f64) -> BoundaryConditions {
    let x0 = 0.4 * mesh.width;
    let x1 = 0.6 * mesh.width;
    let mut bcs = BoundaryConditions::default();
    for j in 0..=mesh.ny {
        bcs.displacement.push(DisplacementConstraint { node: mesh.node_id(0, j), comp: 0, value: 0.0 });
        bcs.displacement.push(DisplacementConstraint {
            node: mesh.node_id(mesh.nx, j),
            comp: 0,
            value: 0.0,
        });
    }
    for i in 0..=mesh.nx {
        let node = mesh.node_id(i, 0);
        let x = mesh.coords[node][0];
        if !(x > x0 && x < x1) {
            bcs.displacement.push(DisplacementConstraint { node, comp: 1, value: 0.0 });
        }
        bcs.pressures.push(PressureConstraint { node: mesh.node_id(i, mesh.ny), value: 0.0 });
    }
    bcs.tractions.push(TractionSegment { side: Side::Bottom, from: x0, to: x1, traction: [0.0, magnitude] });
    bcs
}

/// Uniaxial-strain column: sides and bottom on rollers, uniform downward
/// traction on the whole top. The analytical surface displacement is
/// -t * depth / M with M the constrained modulus.
pub fn uniaxial_bcs(mesh: &Mesh, traction_down: f64) -> BoundaryConditions {
    let mut bcs = BoundaryConditions::default();
    for j in 0..=mesh.ny {
        bcs.displacement.push(DisplacementConstraint { node: mesh.node_id(0, j), comp: 0, value: 0.0 });
        bcs.displacement.push(DisplacementConstraint {
            node: mesh.node_id(mesh.nx, j),
            comp: 0,
            value: 0.0,
        });
    }
    for i in 0..=mesh.nx {
        bcs.displacement.push(DisplacementConstraint { node: mesh.node_id(i, 0), comp: 1, value: 0.0 });
    }
    bcs.tractions.push(TractionSegment {
        side: Side::Top,
        from: 0.0,
        to: mesh.width,
        traction: [0.0, -traction_down],
    });
    bcs
}

/// Terzaghi consolidation column: the uniaxial mechanical setup plus a
/// drained top surface; every other boundary is no-flux by default.
pub fn terzaghi_bcs(mesh: &Mesh, load: f64) -> BoundaryConditions {
    let mut bcs = uniaxial_bcs(mesh, load);
    for i in 0..=mesh.nx {
        bcs.pressures.push(PressureConstraint { node: mesh.node_id(i, mesh.ny), value: 0.0 });
    }
    bcs
}

/// Spatially varying body force in N/m^3, evaluated at quadrature points.
pub type BodyForce<'a> = &'a (dyn Fn(f64, f64) -> [f64; 2] + Sync);

/// Assembled, boundary-condition-eliminated static system K u = f.
#[derive(Debug, Clone)]
pub struct StaticSystem {
    pub matrix: SparseSymmetric,
    pub load: Vec<f64>,
}

/// Displacement solution of the static problem, with the solve residual
/// ||K u - f|| / ||f|| recorded.
#[derive(Debug, Clone)]
pub struct StaticSolution {
    /// Interleaved nodal displacements (u_x, u_y) in meters.
    pub u: Vec<f64>,
    pub residual: f64,
}

/// Assembles the plane-strain stiffness and load vector, applies tractions,
/// the optional uniform body force (N/m^3), and eliminates the essential
/// displacement constraints symmetrically.
pub fn assemble_static(
    mesh: &Mesh,
    element_classes: &[u8],
    registry: &MaterialRegistry,
    bcs: &BoundaryConditions,
    body_force: Option<BodyForce>,
) -> Result<StaticSystem, FemError> {
    if element_classes.len() != mesh.n_elements() {
        return Err(FemError::ClassCountMismatch {
            got: element_classes.len(),
            want: mesh.n_elements(),
        });
    }
    bcs.validate(mesh)?;
    let n_dofs = 2 * mesh.n_nodes();
    let mut coo = CooBuilder::new(n_dofs);
    let mut load = vec![0.0f64; n_dofs];

    // Element classes map to constitutive matrices once.
    let mut d_cache: Vec<Option<SMatrix<f64, 3, 3>>> = vec![None; 256];
    for (e, conn) in mesh.conn.iter().enumerate() {
        let class = element_classes[e];
        if d_cache[class as usize].is_none() {
            let mat = registry.get(class).ok_or(FemError::UnknownMaterial(class))?;
            d_cache[class as usize] = Some(plane_strain_d(mat.youngs_modulus, mat.poisson_ratio));
        }
        let d = d_cache[class as usize].as_ref().unwrap();
        let coords = [
            mesh.coords[conn[0]],
            mesh.coords[conn[1]],
            mesh.coords[conn[2]],
            mesh.coords[conn[3]],
        ];
        let k = element_stiffness(&coords, d);
        let dofs = [
            2 * conn[0],
            2 * conn[0] + 1,
            2 * conn[1],
            2 * conn[1] + 1,
            2 * conn[2],
            2 * conn[2] + 1,
            2 * conn[3],
            2 * conn[3] + 1,
        ];
        for (r, &dr) in dofs.iter().enumerate() {
            for (c, &dc) in dofs.iter().enumerate() {
                coo.push(dr, dc, k[(r, c)]);
            }
        }
        if let Some(b) = body_force {
            // 3x3 quadrature so a smooth manufactured forcing does not limit
            // the observed convergence order.
            for &(xi, eta, w) in GAUSS_3X3.iter() {
                let (_, det) = grads_at(&coords, xi, eta);
                let n = shape_fns(xi, eta);
                let mut x = 0.0;
                let mut y = 0.0;
                for a in 0..4 {
                    x += n[a] * coords[a][0];
                    y += n[a] * coords[a][1];
                }
                let f = b(x, y);
                for a in 0..4 {
                    load[dofs[2 * a]] += n[a] * f[0] * det * w;
                    load[dofs[2 * a + 1]] += n[a] * f[1] * det * w;
                }
            }
        }
    }

    for seg in &bcs.tractions {
        for (a, b, pa, pb) in side_edges(mesh, seg.side) {
            if let Some((wa, wb)) = edge_weights(pa, pb, seg.from, seg.to) {
                for k in 0..2 {
                    load[2 * a + k] += seg.traction[k] * wa;
                    load[2 * b + k] += seg.traction[k] * wb;
                }
            }
        }
    }

    let full = coo.compress();
    let constraints = bcs.displacement_dof_constraints();
    let (matrix, corr) = full.eliminate_dirichlet(&constraints);
    for i in 0..n_dofs {
        load[i] -= corr[i];
    }
    for (dof, g) in &constraints {
        load[*dof] = *g;
    }
    Ok(StaticSystem { matrix, load })
}

/// Direct banded LDL^T solve of the assembled system.
pub fn solve_static(system: &StaticSystem) -> Result<StaticSolution, FemError> {
    let factor = BandFactor::new(&system.matrix)?;
    let u = factor.solve(&system.load);
    Ok(StaticSolution { residual: relative_residual(&system.matrix, &u, &system.load), u })
}

/// Jacobi-preconditioned CG path for large meshes.
pub fn solve_static_cg(system: &StaticSystem, tol: f64, max_iter: usize) -> Result<StaticSolution, FemError> {
    let u = solve_cg(&system.matrix, &system.load, tol, max_iter)?;
    Ok(StaticSolution { residual: relative_residual(&system.matrix, &u, &system.load), u })
}

pub(crate) fn relative_residual(a: &SparseSymmetric, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; b.len()];
    a.matvec(x, &mut ax);
    let diff: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let b_norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm > 0.0 {
        diff / b_norm
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_mesh;
    use crate::fem::sampling::sample_uy_grid;
    use crate::geom::{DomainSpec, MaterialRegistry};
    use approx::assert_relative_eq;

    fn unit_domain() -> DomainSpec {
        DomainSpec { width: 1.0, depth: 1.0, raster_w: 16, raster_h: 16 }
    }

    /// Independent single-element oracle: exact polynomial integration of
    /// B^T D B over the reference square for a unit element, no quadrature
    /// and no Jacobian machinery. Shape-function gradients on the unit square
    /// are linear polynomials in (xi, eta); entries of the stiffness
    /// integrand are at most biquadratic, integrated term by term.
    fn unit_element_stiffness_by_hand(d: &SMatrix<f64, 3, 3>) -> SMatrix<f64, 8, 8> {
        // Polynomial in xi, eta with powers up to 2: coeff[p][q] * xi^p eta^q.
        type Poly = [[f64; 3]; 3];
        fn mul(a: &Poly, b: &Poly) -> Poly {
            let mut out = [[0.0; 3]; 3];
            for (pa, row_a) in a.iter().enumerate() {
                for (qa, &ca) in row_a.iter().enumerate() {
                    if ca == 0.0 {
                        continue;
                    }
                    for (pb, row_b) in b.iter().enumerate() {
                        for (qb, &cb) in row_b.iter().enumerate() {
                            if cb != 0.0 {
                                out[pa + pb][qa + qb] += ca * cb;
                            }
                        }
                    }
                }
            }
            out
        }
        // Integral of xi^p eta^q over [-1,1]^2.
        fn integral(p: &Poly) -> f64 {
            let mom = |k: usize| -> f64 {
                match k {
                    0 => 2.0,
                    2 => 2.0 / 3.0,
                    _ => 0.0,
                }
            };
            let mut acc = 0.0;
            for (pi, row) in p.iter().enumerate() {
                for (qi, &c) in row.iter().enumerate() {
                    acc += c * mom(pi) * mom(qi);
                }
            }
            acc
        }
        fn poly(c0: f64, cxi: f64, ceta: f64) -> Poly {
            let mut p = [[0.0; 3]; 3];
            p[0][0] = c0;
            p[1][0] = cxi;
            p[0][1] = ceta;
            p
        }
        // For the unit square, x = (xi+1)/2 so d/dx = 2 d/dxi.
        // dN_a/dx = +-(1 -+ eta)/2, dN_a/dy = +-(1 -+ xi)/2.
        let dndx = [
            poly(-0.5, 0.0, 0.5),
            poly(0.5, 0.0, -0.5),
            poly(0.5, 0.0, 0.5),
            poly(-0.5, 0.0, -0.5),
        ];
        let dndy = [
            poly(-0.5, 0.5, 0.0),
            poly(-0.5, -0.5, 0.0),
            poly(0.5, 0.5, 0.0),
            poly(0.5, -0.5, 0.0),
        ];
        let zero = poly(0.0, 0.0, 0.0);
        // Rows of B for dof k: [eps_xx, eps_yy, gamma_xy].
        let b_col = |k: usize| -> [Poly; 3] {
            let a = k / 2;
            if k % 2 == 0 {
                [dndx[a], zero, dndy[a]]
            } else {
                [zero, dndy[a], dndx[a]]
            }
        };
        let mut k_mat = SMatrix::<f64, 8, 8>::zeros();
        for r in 0..8 {
            for c in 0..8 {
                let br = b_col(r);
                let bc = b_col(c);
                let mut acc = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        if d[(i, j)] != 0.0 {
                            // detJ = 1/4 for the unit element.
                            acc += d[(i, j)] * integral(&mul(&br[i], &bc[j])) * 0.25;
                        }
                    }
                }
                k_mat[(r, c)] = acc;
            }
        }
        k_mat
    }

    #[test]
    fn single_element_matches_hand_integration() {
        let d = plane_strain_d(1.0, 0.0);
        let coords = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let k = element_stiffness(&coords, &d);
        let oracle = unit_element_stiffness_by_hand(&d);
        for r in 0..8 {
            for c in 0..8 {
                assert_relative_eq!(k[(r, c)], oracle[(r, c)], epsilon = 1e-14, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn zero_traction_zero_gravity_gives_zero_load() {
        let mesh = build_mesh(&unit_domain(), 3, 3).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![0u8; mesh.n_elements()];
        let mut bcs = BoundaryConditions::default();
        bcs.displacement.push(DisplacementConstraint { node: 0, comp: 0, value: 0.0 });
        bcs.displacement.push(DisplacementConstraint { node: 0, comp: 1, value: 0.0 });
        bcs.displacement.push(DisplacementConstraint { node: 3, comp: 1, value: 0.0 });
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, None).unwrap();
        assert!(sys.load.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constrained_stiffness_is_symmetric_positive_definite() {
        let mesh = build_mesh(&unit_domain(), 3, 3).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![0u8; mesh.n_elements()];
        let bcs = uniaxial_bcs(&mesh, 1.0);
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, None).unwrap();
        assert!(sys.matrix.max_asymmetry() / sys.matrix.max_abs() < 1e-12);
        // Dense eigendecomposition oracle.
        let eig = sys.matrix.to_dense().symmetric_eigen();
        for ev in eig.eigenvalues.iter() {
            assert!(*ev > 0.0, "eigenvalue {ev} not positive");
        }
    }

    #[test]
    fn zero_load_gives_zero_displacement() {
        let mesh = build_mesh(&unit_domain(), 4, 4).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![0u8; mesh.n_elements()];
        let bcs = uniaxial_bcs(&mesh, 0.0);
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, None).unwrap();
        let sol = solve_static(&sys).unwrap();
        assert!(sol.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniaxial_column_matches_constrained_modulus() {
        let domain = DomainSpec::default();
        let mesh = build_mesh(&domain, 16, 16).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![0u8; mesh.n_elements()];
        let t = 1e6;
        let bcs = uniaxial_bcs(&mesh, t);
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, None).unwrap();
        let sol = solve_static(&sys).unwrap();
        assert!(sol.residual < 1e-8);
        let mat = reg.get(0).unwrap();
        let m = super::super::analytic::constrained_modulus(mat.youngs_modulus, mat.poisson_ratio);
        let expected = -t * domain.depth / m;
        for &node in &mesh.surface_nodes() {
            let uy = sol.u[2 * node + 1];
            assert_relative_eq!(uy, expected, max_relative = 1e-6);
        }
    }

    #[test]
    fn work_energy_balance_holds() {
        let domain = DomainSpec::default();
        let mesh = build_mesh(&domain, 12, 8).unwrap();
        let reg = MaterialRegistry::default();
        let field = crate::geom::rasterize(&domain, &crate::geom::LayerSpec::with_dip(20.0), 12, 8)
            .unwrap();
        let bcs = injection_bcs(&mesh, 1e6);
        let sys = assemble_static(&mesh, &field.element_classes, &reg, &bcs, None).unwrap();
        let sol = solve_static(&sys).unwrap();
        let uf: f64 = sol.u.iter().zip(&sys.load).map(|(a, b)| a * b).sum();
        let mut ku = vec![0.0; sol.u.len()];
        sys.matrix.matvec(&sol.u, &mut ku);
        let uku: f64 = sol.u.iter().zip(&ku).map(|(a, b)| a * b).sum();
        assert_relative_eq!(uf, uku, max_relative = 1e-8);
    }

    #[test]
    fn solve_is_invariant_under_dof_reordering() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let domain = DomainSpec::default();
        let mesh = build_mesh(&domain, 6, 5).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![0u8; mesh.n_elements()];
        let bcs = injection_bcs(&mesh, 1e6);
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, None).unwrap();
        let sol = solve_static(&sys).unwrap();

        let n = sys.load.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        perm.shuffle(&mut rng);
        let mut coo = CooBuilder::new(n);
        for i in 0..n {
            for (j, v) in sys.matrix.row(i) {
                coo.push(perm[i], perm[j], v);
            }
        }
        let permuted = coo.compress();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[perm[i]] = sys.load[i];
        }
        let x = BandFactor::new(&permuted).unwrap().solve(&rhs);
        let max_u = sol.u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            assert!(
                (x[perm[i]] - sol.u[i]).abs() <= 1e-10 * max_u.max(1.0),
                "dof {i} differs after reordering"
            );
        }
    }

    #[test]
    fn missing_constraints_report_rigid_modes() {
        let mesh = build_mesh(&unit_domain(), 3, 3).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![0u8; mesh.n_elements()];
        let mut bcs = BoundaryConditions::default();
        bcs.tractions.push(TractionSegment { side: Side::Top, from: 0.0, to: 1.0, traction: [0.0, -1.0] });
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, None).unwrap();
        match solve_static(&sys) {
            Err(FemError::UnderConstrained { null_dim }) => {
                assert_eq!(null_dim, 3, "expected the three rigid-body modes");
            }
            other => panic!("expected UnderConstrained, got {other:?}"),
        }
    }

    #[test]
    fn unknown_material_class_is_registry_error() {
        let mesh = build_mesh(&unit_domain(), 2, 2).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![7u8; mesh.n_elements()];
        let bcs = uniaxial_bcs(&mesh, 1.0);
        assert!(matches!(
            assemble_static(&mesh, &classes, &reg, &bcs, None),
            Err(FemError::UnknownMaterial(7))
        ));
    }

    #[test]
    fn cg_path_agrees_with_direct_path() {
        let domain = DomainSpec::default();
        let mesh = build_mesh(&domain, 10, 6).unwrap();
        let reg = MaterialRegistry::default();
        let classes = vec![0u8; mesh.n_elements()];
        let bcs = injection_bcs(&mesh, 1e6);
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, None).unwrap();
        let direct = solve_static(&sys).unwrap();
        let cg = solve_static_cg(&sys, 1e-12, 20_000).unwrap();
        let grid_a = sample_uy_grid(&direct.u, &mesh, 50, 25);
        let grid_b = sample_uy_grid(&cg.u, &mesh, 50, 25);
        let scale = grid_a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in grid_a.iter().zip(&grid_b) {
            assert!((a - b).abs() < 1e-8 * scale.max(1e-30));
        }
    }
}
