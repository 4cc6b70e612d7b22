//! Central finite-difference gradient checking in f64.
//!
//! The `build` closure reconstructs the computation from scratch for every
//! evaluation, so it must be deterministic (seed any internal randomness per
//! call). Analytic gradients come from one tape backward; each checked
//! element is then perturbed both ways and compared.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Id, Tape, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Elements checked per leaf; large leaves are subsampled to this many.
    pub max_per_leaf: usize,
    /// Relative error floor: err = |ad - fd| / max(floor, |ad|, |fd|).
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { max_per_leaf: usize::MAX, rel_floor: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (leaf index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Checks d(loss)/d(leaf) for every leaf against central differences.
pub fn gradcheck<F>(
    build: F,
    leaves: &[Tensor<f64>],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Id]) -> Result<Id, TensorError>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<Id> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let ids: Vec<Id> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NotScalar {
            op: "gradcheck",
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(id, leaf)| tape.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h_base = f64::EPSILON.cbrt();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();

    for (l, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let mut indices: Vec<usize> = (0..n).collect();
        if n > config.max_per_leaf {
            indices.shuffle(&mut rng);
            indices.truncate(config.max_per_leaf);
            indices.sort_unstable();
        }
        for &k in &indices {
            let x0 = leaf.data()[k];
            let h = h_base * x0.abs().max(1.0);
            work[l].data_mut()[k] = x0 + h;
            let f_plus = eval(&work)?;
            work[l].data_mut()[k] = x0 - h;
            let f_minus = eval(&work)?;
            work[l].data_mut()[k] = x0;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let ad = analytic[l].data()[k];
            let denom = config.rel_floor.max(ad.abs()).max(fd.abs());
            let rel = (ad - fd).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((l, k, ad, fd));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let report = gradcheck(
            |tape, ids| {
                let y = tape.mul(ids[0], ids[0])?;
                Ok(tape.sum(y))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradients() {
        // relu applied to the *square* but gradient path broken on purpose by
        // treating the input as constant: loss built from a constant leaf
        // yields zero analytic grads while FD sees the true slope.
        let x = Tensor::new(vec![3], vec![0.5, 1.5, -0.5]).unwrap();
        let report = gradcheck(
            |tape, ids| {
                let c = tape.constant(tape.value(ids[0]).clone());
                let y = tape.mul(c, c)?;
                Ok(tape.sum(y))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err > 0.5, "should flag the broken path");
    }

    #[test]
    fn subsampling_limits_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[100], 1.0, &mut rng);
        let cfg = GradCheckConfig { max_per_leaf: 7, ..Default::default() };
        let report = gradcheck(
            |tape, ids| {
                let y = tape.tanh(ids[0]);
                Ok(tape.mean(y))
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert_eq!(report.checked, 7);
        assert!(report.max_rel_err < 1e-8);
    }
}
