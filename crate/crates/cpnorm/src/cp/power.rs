//! Greedy rank-1 power iteration for CP decomposition.
//!
//! Components are extracted one at a time: alternating higher-order power
//! iteration finds the dominant rank-1 term of the current residual, the
//! term is subtracted, and the process repeats. On matrices this reduces to
//! computing leading singular pairs one by one.

use super::{CpDecomposition, CpForm};
use crate::tensor::{dot, frobenius_norm, unfold, vec_norm, DenseTensor, Matrix};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// CP decomposition by greedy rank-1 deflation.
///
/// `max_iters` caps the alternating iterations per component; `stop_tol`
/// bounds the per-iteration change of the factor vectors at convergence.
pub fn cp_power(
    target: &DenseTensor,
    rank: usize,
    max_iters: usize,
    stop_tol: f64,
    seed: u64,
) -> Result<CpDecomposition> {
    if rank == 0 {
        return Err(Error::InvalidArgument("cp_power with rank 0".into()));
    }
    let n_modes = target.ndim();
    if n_modes < 2 {
        return Err(Error::InvalidArgument(
            "cp_power needs a tensor of order >= 2".into(),
        ));
    }
    if frobenius_norm(target) == 0.0 {
        return Err(Error::ZeroTarget);
    }
    let shape = target.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let mut residual = target.clone();
    let mut factors: Vec<Matrix> = shape.iter().map(|&d| Matrix::zeros(d, rank)).collect();
    let mut lambdas = vec![0.0; rank];
    let mut total_iters = 0;
    let mut converged = true;

    let max_iters = max_iters.max(1);
    for comp in 0..rank {
        let unfoldings: Vec<Matrix> = (0..n_modes)
            .map(|k| unfold(&residual, k))
            .collect::<Result<_>>()?;
        // Unit random start per mode.
        let mut us: Vec<Vec<f64>> = shape
            .iter()
            .map(|&d| {
                let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
                let n = vec_norm(&v);
                if n < f64::MIN_POSITIVE {
                    v[0] = 1.0;
                } else {
                    v.iter_mut().for_each(|x| *x /= n);
                }
                v
            })
            .collect();

        let mut comp_converged = false;
        let mut dead = false;
        for _ in 0..max_iters {
            total_iters += 1;
            let mut max_change = 0.0f64;
            for k in 0..n_modes {
                let y = contract_all_but(&unfoldings[k], &us, k);
                let n = vec_norm(&y);
                if n < f64::MIN_POSITIVE {
                    // Residual annihilated: target rank is below `comp`.
                    dead = true;
                    break;
                }
                let u_new: Vec<f64> = y.iter().map(|x| x / n).collect();
                let change = 1.0 - dot(&u_new, &us[k]).abs();
                max_change = max_change.max(change);
                us[k] = u_new;
            }
            if dead {
                break;
            }
            if max_change < stop_tol {
                comp_converged = true;
                break;
            }
        }
        if dead {
            // Park remaining components on basis vectors with zero weight.
            for (k, f) in factors.iter_mut().enumerate() {
                for r in comp..rank {
                    let pos = r % shape[k];
                    *f.at_mut(pos, r) = 1.0;
                }
            }
            break;
        }
        converged &= comp_converged;

        // Signed magnitude: full contraction of the residual with the
        // current unit vectors.
        let y0 = contract_all_but(&unfoldings[0], &us, 0);
        let mut lambda = dot(&y0, &us[0]);

        // Sign convention: largest-magnitude entry of each vector positive.
        for u in us.iter_mut() {
            let mut best = 0.0f64;
            let mut best_val = 0.0f64;
            for &x in u.iter() {
                if x.abs() > best {
                    best = x.abs();
                    best_val = x;
                }
            }
            if best_val < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
                lambda = -lambda;
            }
        }

        for (f, u) in factors.iter_mut().zip(&us) {
            f.set_col(comp, u);
        }
        lambdas[comp] = lambda;
        subtract_rank_one(&mut residual, lambda, &us);
    }

    let cp = CpForm::new(factors, lambdas)?;
    let fit_val = super::fit(target, &cp)?;
    Ok(CpDecomposition {
        cp,
        fit: fit_val,
        iterations: total_iters,
        converged,
        fit_delta: 0.0,
    })
}

// y[i] = sum_j unfolding[i, j] * w[j], with w the Kronecker product of the
// other modes' vectors in descending mode order.
fn contract_all_but(unfolding: &Matrix, us: &[Vec<f64>], mode: usize) -> Vec<f64> {
    let mut w = vec![1.0];
    for (k, u) in us.iter().enumerate().rev() {
        if k == mode {
            continue;
        }
        let mut next = Vec::with_capacity(w.len() * u.len());
        for &a in &w {
            for &b in u {
                next.push(a * b);
            }
        }
        w = next;
    }
    debug_assert_eq!(w.len(), unfolding.cols());
    (0..unfolding.rows())
        .map(|i| dot(unfolding.row(i), &w))
        .collect()
}

fn subtract_rank_one(t: &mut DenseTensor, lambda: f64, us: &[Vec<f64>]) {
    let mut term = vec![lambda];
    for u in us {
        let mut next = Vec::with_capacity(term.len() * u.len());
        for &a in &term {
            for &b in u {
                next.push(a * b);
            }
        }
        term = next;
    }
    for (x, d) in t.data_mut().iter_mut().zip(term) {
        *x -= d;
    }
}
