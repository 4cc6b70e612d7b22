//! Analytical consolidation benchmarks used to verify the transient solver.

use crate::geom::Material;

/// Constrained (oedometer) modulus E(1-nu)/((1+nu)(1-2nu)).
pub fn constrained_modulus(e: f64, nu: f64) -> f64 {
    e * (1.0 - nu) / ((1.0 + nu) * (1.0 - 2.0 * nu))
}

/// Consolidation coefficient c_v = kappa * M / mu for incompressible
/// constituents, in m^2/s.
pub fn consolidation_coefficient(mat: &Material) -> f64 {
    mat.permeability * constrained_modulus(mat.youngs_modulus, mat.poisson_ratio)
        / mat.fluid_viscosity
}

/// Normalized excess pore pressure p/p0 of the one-dimensional consolidation
/// column: drained at z = 0, impermeable at z = h, uniform initial pressure.
/// `z` is depth below the drained surface; `tv = c_v t / h^2`.
pub fn terzaghi_pressure(z: f64, h: f64, tv: f64, n_terms: usize) -> f64 {
    let zeta = z / h;
    let mut acc = 0.0;
    for m in 0..n_terms {
        let big_m = std::f64::consts::FRAC_PI_2 * (2 * m + 1) as f64;
        acc += 2.0 / big_m * (big_m * zeta).sin() * (-big_m * big_m * tv).exp();
    }
    acc
}

/// Average degree of consolidation U(tv); settlement is s_inf * U.
pub fn terzaghi_degree_of_consolidation(tv: f64, n_terms: usize) -> f64 {
    let mut acc = 0.0;
    for m in 0..n_terms {
        let big_m = std::f64::consts::FRAC_PI_2 * (2 * m + 1) as f64;
        acc += 2.0 / (big_m * big_m) * (-big_m * big_m * tv).exp();
    }
    1.0 - acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constrained_modulus_reference_value() {
        // E = 10 GPa, nu = 0.25: M = 10e9 * 0.75 / (1.25 * 0.5) = 12 GPa.
        assert_relative_eq!(constrained_modulus(10e9, 0.25), 12e9, max_relative = 1e-12);
    }

    #[test]
    fn pressure_profile_limits() {
        // Early on the series reproduces the uniform load away from the
        // drained boundary; at late times it vanishes.
        assert_relative_eq!(terzaghi_pressure(0.5, 1.0, 1e-6, 4000), 1.0, epsilon = 1e-9);
        assert!(terzaghi_pressure(0.5, 1.0, 5.0, 200) < 1e-4);
        assert_eq!(terzaghi_pressure(0.0, 1.0, 0.1, 200), 0.0);
    }

    #[test]
    fn consolidation_degree_is_monotone() {
        let mut prev = 0.0;
        for k in 1..=100 {
            let u = terzaghi_degree_of_consolidation(0.05 * k as f64, 200);
            assert!(u >= prev);
            prev = u;
        }
        assert!(prev > 0.999);
    }
}
