//! Sparse storage and the direct banded LDL^T solver.
//!
//! Assembled systems are stored row-compressed. The structured mesh keeps the
//! bandwidth small, so the factorization works on a packed band: D on the
//! diagonal slots and the unit lower factor below, column by column. The same
//! factorization covers the positive-definite static stiffness and the
//! symmetric quasidefinite Biot system (positive displacement block, negative
//! pressure block), which admits LDL^T without pivoting.

use super::FemError;

/// Triplet accumulator for assembly.
pub struct CooBuilder {
    dim: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl CooBuilder {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Vec::new(), cols: Vec::new(), vals: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.dim && col < self.dim);
        self.rows.push(row as u32);
        self.cols.push(col as u32);
        self.vals.push(val);
    }

    /// Sums duplicates, drops entries that cancel to exactly zero, and
    /// compresses to CSR.
    pub fn compress(self) -> SparseSymmetric {
        let dim = self.dim;
        let mut order: Vec<usize> = (0..self.vals.len()).collect();
        order.sort_unstable_by_key(|&k| (self.rows[k], self.cols[k]));

        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx: Vec<u32> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut k = 0;
        while k < order.len() {
            let r = self.rows[order[k]];
            let c = self.cols[order[k]];
            let mut v = self.vals[order[k]];
            k += 1;
            while k < order.len() && self.rows[order[k]] == r && self.cols[order[k]] == c {
                v += self.vals[order[k]];
                k += 1;
            }
            if v != 0.0 {
                row_ptr[r as usize + 1] += 1;
                col_idx.push(c);
                values.push(v);
            }
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSymmetric { dim, row_ptr, col_idx, values }
    }
}

/// Square sparse matrix in CSR form with sorted column indices per row.
///
/// Carries no symmetry enforcement by itself; assembled system matrices are
/// expected to satisfy [`SparseSymmetric::max_asymmetry`] within tolerance and
/// the assembly routines symmetrize element contributions to guarantee it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseSymmetric {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&(j as u32)) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        for i in 0..self.dim {
            let mut acc = 0.0;
            for (j, v) in self.row(i) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    /// max |A - A^T| over all stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn half_bandwidth(&self) -> usize {
        let mut bw = 0usize;
        for i in 0..self.dim {
            for (j, _) in self.row(i) {
                bw = bw.max(i.abs_diff(j));
            }
        }
        bw
    }

    /// Dense copy for small verification problems.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Zeroes rows/columns of constrained dofs (keeping a unit diagonal) and
    /// returns the eliminated matrix plus the load correction
    /// `corr[i] = sum_j A[i][j] * g[j]` over constrained columns j, so callers
    /// can fold prescribed values into any right-hand side:
    /// `rhs[i] -= corr[i]` for free dofs, then `rhs[c] = g[c]`.
    pub fn eliminate_dirichlet(&self, constraints: &[(usize, f64)]) -> (SparseSymmetric, Vec<f64>) {
        let mut constrained = vec![false; self.dim];
        let mut value = vec![0.0; self.dim];
        for &(dof, g) in constraints {
            constrained[dof] = true;
            value[dof] = g;
        }
        let mut corr = vec![0.0; self.dim];
        let mut coo = CooBuilder::new(self.dim);
        for i in 0..self.dim {
            if constrained[i] {
                continue;
            }
            for (j, v) in self.row(i) {
                if constrained[j] {
                    corr[i] += v * value[j];
                } else {
                    coo.push(i, j, v);
                }
            }
        }
        for (dof, _) in constraints {
            coo.push(*dof, *dof, 1.0);
        }
        (coo.compress(), corr)
    }
}

/// Banded LDL^T factors of the symmetrically equilibrated matrix.
/// `band[col * (hbw + 1)]` holds D, the slots below hold the unit lower
/// factor of that column.
#[derive(Debug)]
pub struct BandFactor {
    dim: usize,
    hbw: usize,
    band: Vec<f64>,
    /// Jacobi equilibration 1/sqrt(|diag|); evens out the wild scale gap
    /// between displacement and pressure blocks and makes the null-pivot
    /// tolerance meaningful.
    scale: Vec<f64>,
}

impl BandFactor {
    /// Factors a symmetric (or symmetric quasidefinite) matrix without
    /// pivoting. Pivots of the equilibrated matrix below 1e-10 are treated
    /// as a null space; their count is reported in the error.
    pub fn new(a: &SparseSymmetric) -> Result<Self, FemError> {
        let n = a.dim;
        let hbw = a.half_bandwidth();
        let w = hbw + 1;
        let scale: Vec<f64> = (0..n)
            .map(|j| {
                let d = a.get(j, j).abs();
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut band = vec![0.0f64; n * w];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    band[j * w + (i - j)] = v * scale[i] * scale[j];
                }
            }
        }
        let tol = 1e-10;

        let mut null_pivots = 0usize;
        for j in 0..n {
            let k0 = j.saturating_sub(hbw);
            let mut d = band[j * w];
            for k in k0..j {
                let ljk = band[k * w + (j - k)];
                if ljk != 0.0 {
                    d -= ljk * ljk * band[k * w];
                }
            }
            if d.abs() <= tol {
                null_pivots += 1;
                band[j * w] = 1.0;
                let imax = (j + hbw).min(n - 1);
                for i in j + 1..=imax {
                    band[j * w + (i - j)] = 0.0;
                }
                continue;
            }
            band[j * w] = d;
            let imax = (j + hbw).min(n - 1);
            for i in j + 1..=imax {
                let mut acc = band[j * w + (i - j)];
                let kk = i.saturating_sub(hbw).max(k0);
                for k in kk..j {
                    acc -= band[k * w + (i - k)] * band[k * w + (j - k)] * band[k * w];
                }
                band[j * w + (i - j)] = acc / d;
            }
        }
        if null_pivots > 0 {
            return Err(FemError::UnderConstrained { null_dim: null_pivots });
        }
        Ok(Self { dim: n, hbw, band, scale })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.dim);
        let n = self.dim;
        let w = self.hbw + 1;
        let mut x: Vec<f64> = rhs.iter().zip(&self.scale).map(|(r, s)| r * s).collect();
        // Forward substitution, column-oriented.
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                let imax = (j + self.hbw).min(n - 1);
                for i in j + 1..=imax {
                    x[i] -= self.band[j * w + (i - j)] * xj;
                }
            }
        }
        for j in 0..n {
            x[j] /= self.band[j * w];
        }
        // Backward substitution with L^T, then undo the equilibration.
        for j in (0..n).rev() {
            let imax = (j + self.hbw).min(n - 1);
            let mut acc = x[j];
            for i in j + 1..=imax {
                acc -= self.band[j * w + (i - j)] * x[i];
            }
            x[j] = acc;
        }
        for j in 0..n {
            x[j] *= self.scale[j];
        }
        x
    }
}

/// Jacobi-preconditioned conjugate gradients for positive definite systems;
/// the optional path for meshes too large for the direct factorization.
pub fn solve_cg(
    a: &SparseSymmetric,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, FemError> {
    let n = a.dim;
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.get(i, i);
            if d.abs() > 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for iter in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(FemError::IllPosed("matrix is not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r_norm <= tol * b_norm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        if iter == max_iter - 1 {
            return Err(FemError::NoConvergence { residual: r_norm / b_norm, iters: max_iter });
        }
    }
    Err(FemError::NoConvergence { residual: f64::NAN, iters: max_iter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random banded SPD matrix: diagonally dominant.
    fn random_spd(n: usize, hbw: usize, seed: u64) -> SparseSymmetric {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coo = CooBuilder::new(n);
        let mut diag = vec![1.0; n];
        for i in 0..n {
            for j in i + 1..(i + hbw + 1).min(n) {
                let v: f64 = rng.random_range(-1.0..1.0);
                coo.push(i, j, v);
                coo.push(j, i, v);
                diag[i] += v.abs();
                diag[j] += v.abs();
            }
        }
        for i in 0..n {
            coo.push(i, i, diag[i]);
        }
        coo.compress()
    }

    #[test]
    fn coo_compress_sums_and_drops_zeros() {
        let mut coo = CooBuilder::new(3);
        coo.push(0, 0, 2.0);
        coo.push(0, 0, 3.0);
        coo.push(1, 2, 1.0);
        coo.push(1, 2, -1.0);
        coo.push(2, 2, 4.0);
        let m = coo.compress();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 5.0);
        assert_eq!(m.get(1, 2), 0.0);
        assert_eq!(m.get(2, 2), 4.0);
    }

    #[test]
    fn band_ldlt_matches_dense_solve() {
        let a = random_spd(60, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = BandFactor::new(&a).unwrap().solve(&b);
        let dense = a.to_dense();
        let x_dense = dense
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&b))
            .unwrap();
        for i in 0..60 {
            assert_relative_eq!(x[i], x_dense[i], max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn band_ldlt_handles_quasidefinite_blocks() {
        // [A  B; B^T -C] with A, C positive definite.
        let mut coo = CooBuilder::new(4);
        coo.push(0, 0, 4.0);
        coo.push(1, 1, 3.0);
        coo.push(2, 2, -2.0);
        coo.push(3, 3, -1.5);
        for (i, j, v) in [(0, 2, 1.0), (1, 2, -0.5), (1, 3, 0.7)] {
            coo.push(i, j, v);
            coo.push(j, i, v);
        }
        let a = coo.compress();
        let b = vec![1.0, -2.0, 0.5, 3.0];
        let x = BandFactor::new(&a).unwrap().solve(&b);
        let mut ax = vec![0.0; 4];
        a.matvec(&x, &mut ax);
        for i in 0..4 {
            assert_relative_eq!(ax[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_matrix_reports_null_dimension() {
        // Graph Laplacian of a path: one-dimensional null space (constants).
        let mut coo = CooBuilder::new(4);
        for i in 0..3 {
            coo.push(i, i, 1.0);
            coo.push(i + 1, i + 1, 1.0);
            coo.push(i, i + 1, -1.0);
            coo.push(i + 1, i, -1.0);
        }
        let a = coo.compress();
        match BandFactor::new(&a) {
            Err(FemError::UnderConstrained { null_dim }) => assert_eq!(null_dim, 1),
            other => panic!("expected UnderConstrained, got {other:?}"),
        }
    }

    #[test]
    fn cg_agrees_with_direct_solve() {
        let a = random_spd(80, 5, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let direct = BandFactor::new(&a).unwrap().solve(&b);
        let iterative = solve_cg(&a, &b, 1e-12, 1000).unwrap();
        for i in 0..80 {
            assert_relative_eq!(direct[i], iterative[i], max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn dirichlet_elimination_keeps_symmetry() {
        let a = random_spd(20, 3, 7);
        let (elim, corr) = a.eliminate_dirichlet(&[(0, 1.5), (7, -2.0)]);
        assert!(elim.max_asymmetry() < 1e-14);
        assert_eq!(elim.get(0, 0), 1.0);
        assert_eq!(elim.get(7, 7), 1.0);
        assert_eq!(elim.get(0, 1), 0.0);
        // Correction equals A[:, c] * g over constrained columns.
        assert_relative_eq!(corr[1], a.get(1, 0) * 1.5 + a.get(1, 7) * -2.0, epsilon = 1e-14);
    }
}
