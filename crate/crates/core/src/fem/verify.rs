//! Self-verification of the FEM oracle against closed-form solutions:
//! a uniaxial-strain column, a manufactured smooth solution for the
//! convergence order, and the one-dimensional consolidation column.

use super::analytic::{
    consolidation_coefficient, constrained_modulus, terzaghi_pressure,
};
use super::biot::run_transient;
use super::elasticity::{
    assemble_static, solve_static, terzaghi_bcs, uniaxial_bcs, BoundaryConditions,
    DisplacementConstraint, GAUSS_3X3,
};
use super::mesh::{build_mesh, Mesh};
use super::FemError;
use crate::geom::{DomainSpec, MaterialRegistry};

/// Uniaxial-strain column: worst relative error of the surface settlement
/// against -t*H/M over all surface nodes.
pub fn verify_uniaxial(nx: usize, ny: usize) -> Result<f64, FemError> {
    let domain = DomainSpec::default();
    let mesh = build_mesh(&domain, nx, ny)?;
    let reg = MaterialRegistry::default();
    let classes = vec![0u8; mesh.n_elements()];
    let t = 1e6;
    let sys = assemble_static(&mesh, &classes, &reg, &uniaxial_bcs(&mesh, t), None)?;
    let sol = solve_static(&sys)?;
    let mat = reg.get(0).unwrap();
    let expected = -t * domain.depth / constrained_modulus(mat.youngs_modulus, mat.poisson_ratio);
    let mut worst: f64 = 0.0;
    for &node in &mesh.surface_nodes() {
        let rel = (sol.u[2 * node + 1] - expected).abs() / expected.abs();
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// L2 errors of a manufactured smooth solution on a sequence of meshes
/// (each entry doubles nx and ny), plus the observed convergence orders
/// between consecutive levels.
pub fn verify_convergence(base: usize, levels: usize) -> Result<(Vec<f64>, Vec<f64>), FemError> {
    let domain = DomainSpec::default();
    let reg = MaterialRegistry::default();
    let mat = *reg.get(0).unwrap();
    let e = mat.youngs_modulus;
    let nu = mat.poisson_ratio;
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));

    let w = domain.width;
    let d = domain.depth;
    let a = std::f64::consts::PI / w;
    let b = std::f64::consts::PI / d;
    let c = 2.0 * std::f64::consts::PI / w;
    let q = std::f64::consts::PI / d;
    // Exact fields, zero on the whole boundary.
    let ux = move |x: f64, y: f64| (a * x).sin() * (b * y).sin();
    let uy = move |x: f64, y: f64| (c * x).sin() * (q * y).sin();
    // Body force -div(sigma(u_exact)) for homogeneous isotropic material:
    // div sigma = (lambda + mu) grad(div u) + mu laplace(u).
    let force = move |x: f64, y: f64| -> [f64; 2] {
        let fx = (lambda + mu) * (a * a * (a * x).sin() * (b * y).sin()
            - c * q * (c * x).cos() * (q * y).cos())
            + mu * (a * a + b * b) * (a * x).sin() * (b * y).sin();
        let fy = (lambda + mu) * (-a * b * (a * x).cos() * (b * y).cos())
            + ((lambda + mu) * q * q + mu * (c * c + q * q)) * (c * x).sin() * (q * y).sin();
        [fx, fy]
    };

    let mut errors = Vec::new();
    for level in 0..levels {
        let n = base << level;
        let mesh = build_mesh(&domain, n, n)?;
        let classes = vec![0u8; mesh.n_elements()];
        let mut bcs = BoundaryConditions::default();
        for j in 0..=mesh.ny {
            for i in 0..=mesh.nx {
                if i == 0 || j == 0 || i == mesh.nx || j == mesh.ny {
                    let node = mesh.node_id(i, j);
                    bcs.displacement.push(DisplacementConstraint { node, comp: 0, value: 0.0 });
                    bcs.displacement.push(DisplacementConstraint { node, comp: 1, value: 0.0 });
                }
            }
        }
        let sys = assemble_static(&mesh, &classes, &reg, &bcs, Some(&force))?;
        let sol = solve_static(&sys)?;
        errors.push(l2_error(&mesh, &sol.u, &ux, &uy));
    }
    let orders = errors
        .windows(2)
        .map(|pair| (pair[0] / pair[1]).log2())
        .collect();
    Ok((errors, orders))
}

fn l2_error(
    mesh: &Mesh,
    u: &[f64],
    ux: &impl Fn(f64, f64) -> f64,
    uy: &impl Fn(f64, f64) -> f64,
) -> f64 {
    use super::elasticity::{grads_at, shape_fns};
    let mut acc = 0.0;
    for conn in &mesh.conn {
        let coords = [
            mesh.coords[conn[0]],
            mesh.coords[conn[1]],
            mesh.coords[conn[2]],
            mesh.coords[conn[3]],
        ];
        for &(xi, eta, w) in GAUSS_3X3.iter() {
            let n = shape_fns(xi, eta);
            let (_, det) = grads_at(&coords, xi, eta);
            let mut x = 0.0;
            let mut y = 0.0;
            let mut uhx = 0.0;
            let mut uhy = 0.0;
            for a in 0..4 {
                x += n[a] * coords[a][0];
                y += n[a] * coords[a][1];
                uhx += n[a] * u[2 * conn[a]];
                uhy += n[a] * u[2 * conn[a] + 1];
            }
            let dx = uhx - ux(x, y);
            let dy = uhy - uy(x, y);
            acc += (dx * dx + dy * dy) * det * w;
        }
    }
    acc.sqrt()
}

/// Outcome of the consolidation-column verification.
#[derive(Debug, Clone)]
pub struct TerzaghiReport {
    /// (time factor, relative L2 pressure error) at the sampled times.
    pub pressure_errors: Vec<(f64, f64)>,
    /// Worst violation of surface-settlement monotonicity (0 when monotone).
    pub monotonicity_gap: f64,
    /// Relative displacement gap to the static solve at the final time.
    pub drained_gap: f64,
    /// Final time in units of the consolidation time H^2/c_v.
    pub final_tv: f64,
}

/// Runs the Terzaghi column to `final_tv` consolidation times and compares
/// pressure profiles at the requested time factors against the series with
/// `n_terms` terms.
pub fn verify_terzaghi(
    ny: usize,
    steps_per_tv: usize,
    sample_tvs: &[f64],
    final_tv: f64,
    n_terms: usize,
) -> Result<TerzaghiReport, FemError> {
    let domain = DomainSpec { width: 2.0, depth: 10.0, raster_w: 16, raster_h: 16 };
    let mesh = build_mesh(&domain, 2, ny)?;
    let reg = MaterialRegistry::uniform(*MaterialRegistry::default().get(0).unwrap()).unwrap();
    let classes = vec![0u8; mesh.n_elements()];
    let load = 1e5;
    let bcs = terzaghi_bcs(&mesh, load);

    let mat = reg.get(0).unwrap();
    let cv = consolidation_coefficient(mat);
    let h = domain.depth;
    let t_cons = h * h / cv;
    let dt = t_cons / steps_per_tv as f64;
    let n_steps = (final_tv * steps_per_tv as f64).round() as usize;
    let states = run_transient(&mesh, &classes, &reg, &bcs, dt, n_steps)?;

    let mut pressure_errors = Vec::new();
    for &tv in sample_tvs {
        let step = (tv * steps_per_tv as f64).round() as usize;
        let state = &states[step];
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..=ny {
            let node = mesh.node_id(1, j);
            let z = h - mesh.coords[node][1];
            let exact = load * terzaghi_pressure(z, h, tv, n_terms);
            let diff = state.p[node] - exact;
            num += diff * diff;
            den += exact * exact;
        }
        pressure_errors.push((tv, (num / den).sqrt()));
    }

    let mut monotonicity_gap: f64 = 0.0;
    for k in 1..states.len() {
        for i in 0..=mesh.nx {
            let node = mesh.node_id(i, ny);
            let prev = -states[k - 1].u[2 * node + 1];
            let next = -states[k].u[2 * node + 1];
            monotonicity_gap = monotonicity_gap.max(prev - next);
        }
    }

    let sys = assemble_static(&mesh, &classes, &reg, &uniaxial_bcs(&mesh, load), None)?;
    let static_sol = solve_static(&sys)?;
    let last = states.last().unwrap();
    let num: f64 = last
        .u
        .iter()
        .zip(&static_sol.u)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = static_sol.u.iter().map(|v| v * v).sum::<f64>().sqrt();

    Ok(TerzaghiReport {
        pressure_errors,
        monotonicity_gap,
        drained_gap: num / den,
        final_tv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniaxial_is_exact_to_solver_precision() {
        assert!(verify_uniaxial(16, 16).unwrap() < 1e-6);
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        let (errors, orders) = verify_convergence(8, 4).unwrap();
        assert_eq!(errors.len(), 4);
        for (k, ord) in orders.iter().enumerate() {
            assert!(*ord >= 1.9, "order {ord} below 1.9 at doubling {k}: errors {errors:?}");
        }
    }
}
