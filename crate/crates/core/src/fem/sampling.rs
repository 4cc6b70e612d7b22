//! Label sampling: bilinear interpolation of the vertical displacement at the
//! static 50x25 grid and the 40 surface points.

use super::mesh::Mesh;

/// Bilinear interpolation of u_y from interleaved nodal displacements at
/// arbitrary points inside the domain.
pub fn sample_uy_at(u: &[f64], mesh: &Mesh, points: &[[f64; 2]]) -> Vec<f64> {
    assert_eq!(u.len(), 2 * mesh.n_nodes(), "displacement vector length mismatch");
    let dx = mesh.dx();
    let dy = mesh.dy();
    points
        .iter()
        .map(|&[x, y]| {
            let fx = (x / dx).clamp(0.0, mesh.nx as f64);
            let fy = (y / dy).clamp(0.0, mesh.ny as f64);
            let i = (fx.floor() as usize).min(mesh.nx - 1);
            let j = (fy.floor() as usize).min(mesh.ny - 1);
            let xi = 2.0 * (fx - i as f64) - 1.0;
            let eta = 2.0 * (fy - j as f64) - 1.0;
            let n = super::elasticity::shape_fns(xi, eta);
            let conn = mesh.conn[j * mesh.nx + i];
            (0..4).map(|a| n[a] * u[2 * conn[a] + 1]).sum()
        })
        .collect()
}

/// u_y over a uniform cols x rows grid spanning the domain including the
/// boundary, row-major with row 0 at the ground surface.
pub fn sample_uy_grid(u: &[f64], mesh: &Mesh, cols: usize, rows: usize) -> Vec<f64> {
    assert!(cols >= 2 && rows >= 2);
    let mut points = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        let y = mesh.depth * (1.0 - r as f64 / (rows - 1) as f64);
        for c in 0..cols {
            let x = mesh.width * c as f64 / (cols - 1) as f64;
            points.push([x, y]);
        }
    }
    sample_uy_at(u, mesh, &points)
}

/// u_y at `count` uniformly spaced points along the top boundary, endpoints
/// included, left to right.
pub fn sample_surface(u: &[f64], mesh: &Mesh, count: usize) -> Vec<f64> {
    assert!(count >= 2);
    let points: Vec<[f64; 2]> = (0..count)
        .map(|k| [mesh.width * k as f64 / (count - 1) as f64, mesh.depth])
        .collect();
    sample_uy_at(u, mesh, &points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_mesh;
    use crate::geom::DomainSpec;

    fn mesh() -> Mesh {
        build_mesh(&DomainSpec::default(), 10, 7).unwrap()
    }

    #[test]
    fn zero_solution_samples_to_zeros() {
        let mesh = mesh();
        let u = vec![0.0; 2 * mesh.n_nodes()];
        assert!(sample_uy_grid(&u, &mesh, 50, 25).iter().all(|&v| v == 0.0));
        assert!(sample_surface(&u, &mesh, 40).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nodal_points_reproduce_nodal_values() {
        let mesh = mesh();
        let mut u = vec![0.0; 2 * mesh.n_nodes()];
        for (n, c) in mesh.coords.iter().enumerate() {
            u[2 * n + 1] = (c[0] * 0.31).sin() + c[1] * c[1] * 0.01;
        }
        let points: Vec<[f64; 2]> = mesh.coords.clone();
        let sampled = sample_uy_at(&u, &mesh, &points);
        for (n, v) in sampled.iter().enumerate() {
            assert!((v - u[2 * n + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_field_is_reproduced_exactly() {
        let mesh = mesh();
        let (a, b) = (0.37, -0.21);
        let mut u = vec![0.0; 2 * mesh.n_nodes()];
        for (n, c) in mesh.coords.iter().enumerate() {
            u[2 * n + 1] = a * c[0] + b * c[1];
        }
        let grid = sample_uy_grid(&u, &mesh, 50, 25);
        for r in 0..25 {
            let y = mesh.depth * (1.0 - r as f64 / 24.0);
            for c in 0..50 {
                let x = mesh.width * c as f64 / 49.0;
                let expected = a * x + b * y;
                assert!(
                    (grid[r * 50 + c] - expected).abs() < 1e-12 * expected.abs().max(1.0),
                    "mismatch at row {r} col {c}"
                );
            }
        }
    }

    #[test]
    fn surface_sampler_matches_grid_row_zero_at_shared_points() {
        let mesh = mesh();
        let mut u = vec![0.0; 2 * mesh.n_nodes()];
        for (n, c) in mesh.coords.iter().enumerate() {
            u[2 * n + 1] = (0.05 * c[0]).cos() * (0.03 * c[1]).exp();
        }
        let grid = sample_uy_grid(&u, &mesh, 50, 25);
        let surf = sample_surface(&u, &mesh, 40);
        // The 50-point and 40-point abscissae share only the endpoints.
        assert!((surf[0] - grid[0]).abs() < 1e-12);
        assert!((surf[39] - grid[49]).abs() < 1e-12);
    }
}
