//! CP (canonical polyadic) decomposition: the factored representation, an
//! ALS solver, a greedy rank-1 power-iteration solver, and fit-threshold
//! rank estimation.
//!
//! A rank-`R` CP form represents `X = sum_r lambda_r a_r ∘ b_r ∘ c_r ∘ ...`
//! with one factor matrix per mode (columns are the per-component vectors)
//! and a separate magnitude vector `lambda`.

mod als;
mod power;
mod rank;

pub use als::{cp_als, cp_als_with, AlsOptions};
pub use power::cp_power;
pub use rank::{estimate_rank, RankEstimate, RankSearchOptions};

use crate::tensor::{fold, gemm_nt, khatri_rao, DenseTensor, Matrix};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A tensor in CP form: per-mode factor matrices (`shape[k] x rank`) plus a
/// magnitude per component.
#[derive(Debug, Clone, PartialEq)]
pub struct CpForm {
    factors: Vec<Matrix>,
    lambdas: Vec<f64>,
}

/// Result of a decomposition solver.
#[derive(Debug, Clone)]
pub struct CpDecomposition {
    pub cp: CpForm,
    /// `1 - ||X - X_hat||_F / ||X||_F` at termination.
    pub fit: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Fit improvement contributed by the final iteration (0 for solvers
    /// that do not track a per-iteration fit).
    pub fit_delta: f64,
}

/// How component magnitudes are initialized when drawing a random CP form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaInit {
    Ones,
    StdNormal,
}

impl CpForm {
    pub fn new(factors: Vec<Matrix>, lambdas: Vec<f64>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("CpForm with no factors".into()));
        }
        let rank = lambdas.len();
        if rank == 0 {
            return Err(Error::InvalidArgument("CpForm with rank 0".into()));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.cols() != rank {
                return Err(Error::shape("CpForm factor columns", rank, f.cols()))
                    .map_err(|e| annotate_mode(e, k));
            }
            if f.rows() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "CpForm factor {k} has no rows"
                )));
            }
        }
        Ok(CpForm { factors, lambdas })
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [Matrix] {
        &mut self.factors
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambdas_mut(&mut self) -> &mut [f64] {
        &mut self.lambdas
    }

    /// Dense tensor represented by this form.
    pub fn reconstruct(&self) -> DenseTensor {
        reconstruct_from(&self.factors, &self.lambdas)
    }

    /// Frobenius norm without materializing the dense tensor:
    /// `||X||^2 = lambda^T (G_1 ∘ G_2 ∘ ...) lambda` with Gramians `G_k`.
    pub fn norm(&self) -> f64 {
        let r = self.rank();
        let mut v = Matrix::from_fn(r, r, |_, _| 1.0);
        for f in &self.factors {
            v.hadamard_in_place(&crate::tensor::gemm_tn(f, f));
        }
        let mut acc = 0.0;
        for i in 0..r {
            for j in 0..r {
                acc += self.lambdas[i] * v.at(i, j) * self.lambdas[j];
            }
        }
        acc.abs().sqrt()
    }

    /// Rescales every factor column to unit Euclidean norm, leaving `lambda`
    /// untouched. Errors on an exactly-zero column, identifying the mode and
    /// component.
    pub fn renormalize(&self) -> Result<CpForm> {
        self.renormalize_impl(false)
    }

    /// Like [`renormalize`](Self::renormalize), but multiplies the removed
    /// column norms into `lambda`, preserving the represented tensor.
    pub fn renormalize_absorbing(&self) -> Result<CpForm> {
        self.renormalize_impl(true)
    }

    fn renormalize_impl(&self, absorb: bool) -> Result<CpForm> {
        let mut factors = self.factors.clone();
        let mut lambdas = self.lambdas.clone();
        for (k, f) in factors.iter_mut().enumerate() {
            let norms = f.col_norms();
            for (r, &n) in norms.iter().enumerate() {
                if n < f64::MIN_POSITIVE {
                    return Err(Error::ZeroColumn {
                        layer: None,
                        mode: k,
                        rank: r,
                    });
                }
                if absorb {
                    lambdas[r] *= n;
                }
            }
            for i in 0..f.rows() {
                for (x, n) in f.row_mut(i).iter_mut().zip(&norms) {
                    *x /= n;
                }
            }
        }
        Ok(CpForm { factors, lambdas })
    }
}

fn annotate_mode(e: Error, mode: usize) -> Error {
    match e {
        Error::ShapeMismatch {
            context, expected, ..
        } => Error::ShapeMismatch {
            context,
            expected,
            got: format!("mismatch at mode {mode}"),
        },
        other => other,
    }
}

/// Reconstructs the dense tensor for explicit factors and magnitudes.
pub(crate) fn reconstruct_from(factors: &[Matrix], lambdas: &[f64]) -> DenseTensor {
    let shape: Vec<usize> = factors.iter().map(Matrix::rows).collect();
    let rank = lambdas.len();
    if factors.len() == 1 {
        let f = &factors[0];
        let mut data = vec![0.0; f.rows()];
        for (i, x) in data.iter_mut().enumerate() {
            *x = (0..rank).map(|r| lambdas[r] * f.at(i, r)).sum();
        }
        return DenseTensor::new(shape, data).expect("consistent by construction");
    }
    // X_(0) = (A_0 diag(lambda)) * KR(A_{n-1}, ..., A_1)^T, then fold.
    let mut scaled = factors[0].clone();
    for i in 0..scaled.rows() {
        for (x, &l) in scaled.row_mut(i).iter_mut().zip(lambdas) {
            *x *= l;
        }
    }
    let others: Vec<&Matrix> = factors[1..].iter().rev().collect();
    let kr = khatri_rao(&others).expect("factor columns agree by construction");
    let m0 = gemm_nt(&scaled, &kr);
    fold(&m0, 0, &shape).expect("unfolding dims agree by construction")
}

/// Matricized-tensor-times-Khatri-Rao-product for ALS and gradient passes:
/// `unfolding * KR(factors != mode, descending mode order)`.
///
/// The Khatri-Rao product is materialized when small enough; otherwise the
/// product streams one component column at a time.
pub(crate) fn mttkrp(unfolding: &Matrix, factors: &[Matrix], mode: usize) -> Matrix {
    const MATERIALIZE_LIMIT: usize = 4 << 20; // entries, 32 MB of f64
    let others: Vec<&Matrix> = factors
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != mode)
        .map(|(_, f)| f)
        .rev()
        .collect();
    let rank = factors[mode].cols();
    let p: usize = others.iter().map(|m| m.rows()).product();
    debug_assert_eq!(unfolding.cols(), p);
    if others.len() == 1 {
        return crate::tensor::gemm(unfolding, others[0]);
    }
    if p * rank <= MATERIALIZE_LIMIT {
        let kr = khatri_rao(&others).expect("factor columns agree");
        return crate::tensor::gemm(unfolding, &kr);
    }
    // Streamed path: build each Khatri-Rao column on the fly.
    let rows = unfolding.rows();
    let mut out = Matrix::zeros(rows, rank);
    let mut col = vec![0.0; p];
    let mut scratch = vec![0.0; p];
    for r in 0..rank {
        build_kron_column(&others, r, &mut col, &mut scratch);
        for i in 0..rows {
            let acc = crate::tensor::dot(unfolding.row(i), &col);
            *out.at_mut(i, r) = acc;
        }
    }
    out
}

// Kronecker product of column `r` of each input (first input slowest).
fn build_kron_column(mats: &[&Matrix], r: usize, out: &mut [f64], scratch: &mut [f64]) {
    out[0] = 1.0;
    let mut len = 1usize;
    for m in mats {
        let rows = m.rows();
        scratch[..len * rows].fill(0.0);
        for i in 0..len {
            let a = out[i];
            for j in 0..rows {
                scratch[i * rows + j] = a * m.at(j, r);
            }
        }
        len *= rows;
        out[..len].copy_from_slice(&scratch[..len]);
    }
}

/// `1 - ||target - reconstruct||_F / ||target||_F`; 1.0 is a perfect fit.
pub fn fit(target: &DenseTensor, cp: &CpForm) -> Result<f64> {
    if target.shape() != cp.shape().as_slice() {
        return Err(Error::shape(
            "fit target shape",
            format!("{:?}", cp.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let target_norm = crate::tensor::frobenius_norm(target);
    if target_norm == 0.0 {
        return Err(Error::ZeroTarget);
    }
    let recon = cp.reconstruct();
    let err: f64 = target
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(1.0 - err.sqrt() / target_norm)
}

/// Draws a random CP form: factor columns are standard normal vectors scaled
/// to unit norm, magnitudes come from `lambda_init`.
pub fn random_cp(
    shape: &[usize],
    rank: usize,
    lambda_init: LambdaInit,
    rng: &mut impl Rng,
) -> Result<CpForm> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "random_cp shape must be non-empty with positive dims, got {shape:?}"
        )));
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("random_cp with rank 0".into()));
    }
    let normal = StandardNormal;
    let mut factors = Vec::with_capacity(shape.len());
    for &d in shape {
        let mut f = Matrix::zeros(d, rank);
        for r in 0..rank {
            let mut norm_sq = 0.0;
            let mut col = vec![0.0; d];
            while norm_sq < f64::MIN_POSITIVE {
                for x in col.iter_mut() {
                    *x = normal.sample(rng);
                }
                norm_sq = col.iter().map(|&x| x * x).sum();
            }
            let norm = norm_sq.sqrt();
            for (i, &x) in col.iter().enumerate() {
                *f.at_mut(i, r) = x / norm;
            }
        }
        factors.push(f);
    }
    let lambdas = match lambda_init {
        LambdaInit::Ones => vec![1.0; rank],
        LambdaInit::StdNormal => (0..rank).map(|_| normal.sample(rng)).collect(),
    };
    CpForm::new(factors, lambdas)
}
