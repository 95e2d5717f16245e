//! Reparametrized weight blocks.
//!
//! [`CpNormParam`] holds a weight tensor in CP form together with a global
//! length `sigma`; the realized weight normalizes every factor column inside
//! the rank sum, so the factor magnitudes are invisible to the forward pass.
//! [`WeightNormParam`] is the classic single-length baseline `g * v/||v||`.
//! Both expose exact analytic gradients for reverse-mode training.

use crate::cp::{mttkrp, CpForm};
use crate::tensor::{frobenius_norm, unfold, DenseTensor, Matrix};
use crate::{Error, Result};

/// Weight tensor stored as a CP decomposition plus a global length `sigma`.
///
/// The realized weight is `sigma * sum_r lambda_r * (u_1r ∘ u_2r ∘ ...)`
/// where `u_kr` is the unit-normalized column `r` of factor `k`. Because the
/// columns are normalized inside the formula, the forward map is invariant
/// under positive rescaling of any column.
#[derive(Debug, Clone)]
pub struct CpNormParam {
    pub cp: CpForm,
    pub sigma: f64,
}

/// Gradients for every scalar in a [`CpNormParam`], shaped like the parameter.
#[derive(Debug, Clone)]
pub struct CpNormGrads {
    pub sigma: f64,
    pub lambdas: Vec<f64>,
    pub factors: Vec<Matrix>,
}

impl CpNormGrads {
    pub fn zeros_like(p: &CpNormParam) -> Self {
        CpNormGrads {
            sigma: 0.0,
            lambdas: vec![0.0; p.cp.rank()],
            factors: p
                .cp
                .factors()
                .iter()
                .map(|f| Matrix::zeros(f.rows(), f.cols()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        self.sigma = 0.0;
        self.lambdas.fill(0.0);
        for f in &mut self.factors {
            f.data_mut().fill(0.0);
        }
    }

    fn add(&mut self, other: &CpNormGrads) {
        self.sigma += other.sigma;
        for (a, b) in self.lambdas.iter_mut().zip(&other.lambdas) {
            *a += b;
        }
        for (a, b) in self.factors.iter_mut().zip(&other.factors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

impl CpNormParam {
    pub fn new(cp: CpForm, sigma: f64) -> Result<Self> {
        if !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma must be finite, got {sigma}"
            )));
        }
        Ok(CpNormParam { cp, sigma })
    }

    /// Realizes the dense weight tensor: unit-normalizes every factor column,
    /// reconstructs the rank sum, and scales by `sigma`.
    pub fn weight(&self) -> Result<DenseTensor> {
        let unit = self.cp.renormalize()?;
        let mut w = unit.reconstruct();
        for x in w.data_mut() {
            *x *= self.sigma;
        }
        Ok(w)
    }

    /// Chain rule through the normalized rank sum.
    ///
    /// With `u_kr = c_kr/||c_kr||` and `g_r = <u_1r ∘ u_2r ∘ ..., grad_w>`:
    /// the `sigma` gradient is `sum_r lambda_r g_r`, each `lambda_r` gradient
    /// is `sigma * g_r`, and each column gradient is the tangential part
    /// `(sigma lambda_r/||c_kr||) (I - u u^T) h_kr`, where `h_kr` contracts
    /// `grad_w` with the unit columns of every other mode (one matricized
    /// Khatri-Rao product per mode). The radial part vanishes because the
    /// forward map ignores column magnitudes.
    pub fn backward(&self, grad_w: &DenseTensor) -> Result<CpNormGrads> {
        let shape = self.cp.shape();
        if grad_w.shape() != shape {
            return Err(Error::shape(
                "cpnorm backward upstream gradient",
                format!("{shape:?}"),
                format!("{:?}", grad_w.shape()),
            ));
        }
        let n_modes = shape.len();
        let rank = self.cp.rank();
        let lambdas = self.cp.lambdas();

        let mut unit_factors = Vec::with_capacity(n_modes);
        let mut norms = Vec::with_capacity(n_modes);
        for (k, f) in self.cp.factors().iter().enumerate() {
            let col_norms = f.col_norms();
            if let Some(r) = col_norms.iter().position(|&n| n < f64::MIN_POSITIVE) {
                return Err(Error::ZeroColumn {
                    layer: None,
                    mode: k,
                    rank: r,
                });
            }
            let mut u = f.clone();
            for i in 0..u.rows() {
                for (x, n) in u.row_mut(i).iter_mut().zip(&col_norms) {
                    *x /= n;
                }
            }
            unit_factors.push(u);
            norms.push(col_norms);
        }

        let mut term_inner = vec![0.0; rank];
        let mut grad_factors = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            let unf = unfold(grad_w, k)?;
            let h = mttkrp(&unf, &unit_factors, k);
            let u = &unit_factors[k];
            let d = shape[k];
            let mut g = Matrix::zeros(d, rank);
            for r in 0..rank {
                let mut radial = 0.0;
                for i in 0..d {
                    radial += u.at(i, r) * h.at(i, r);
                }
                if k == 0 {
                    // <u_1r ∘ ... , grad_w> via mode 0's contraction.
                    term_inner[r] = radial;
                }
                let scale = self.sigma * lambdas[r] / norms[k][r];
                for i in 0..d {
                    *g.at_mut(i, r) = scale * (h.at(i, r) - radial * u.at(i, r));
                }
            }
            grad_factors.push(g);
        }

        let grad_sigma = (0..rank).map(|r| lambdas[r] * term_inner[r]).sum();
        let grad_lambdas = term_inner.iter().map(|&g| self.sigma * g).collect();
        Ok(CpNormGrads {
            sigma: grad_sigma,
            lambdas: grad_lambdas,
            factors: grad_factors,
        })
    }

    /// Accumulating variant of [`backward`](Self::backward).
    pub fn backward_into(&self, grad_w: &DenseTensor, acc: &mut CpNormGrads) -> Result<()> {
        let g = self.backward(grad_w)?;
        acc.add(&g);
        Ok(())
    }
}

/// Weight-normalization baseline: a direction tensor `v` and one length `g`
/// per tensor, realizing `w = g * v / ||v||` with the Frobenius norm over the
/// flattened tensor.
#[derive(Debug, Clone)]
pub struct WeightNormParam {
    pub v: DenseTensor,
    pub g: f64,
}

/// Gradients for a [`WeightNormParam`].
#[derive(Debug, Clone)]
pub struct WeightNormGrads {
    pub v: DenseTensor,
    pub g: f64,
}

impl WeightNormGrads {
    pub fn zeros_like(p: &WeightNormParam) -> Self {
        WeightNormGrads {
            v: DenseTensor::zeros(p.v.shape()),
            g: 0.0,
        }
    }

    pub fn zero(&mut self) {
        self.g = 0.0;
        self.v.data_mut().fill(0.0);
    }
}

impl WeightNormParam {
    pub fn new(v: DenseTensor, g: f64) -> Result<Self> {
        if frobenius_norm(&v) < f64::MIN_POSITIVE {
            return Err(Error::InvalidArgument(
                "weight-norm direction tensor must not be all zeros".into(),
            ));
        }
        if !g.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight-norm length must be finite, got {g}"
            )));
        }
        Ok(WeightNormParam { v, g })
    }

    pub fn weight(&self) -> Result<DenseTensor> {
        let n = frobenius_norm(&self.v);
        if n < f64::MIN_POSITIVE {
            return Err(Error::InvalidArgument(
                "weight-norm direction tensor must not be all zeros".into(),
            ));
        }
        let mut w = self.v.clone();
        let s = self.g / n;
        for x in w.data_mut() {
            *x *= s;
        }
        Ok(w)
    }

    /// `dL/dg = <v/||v||, grad_w>`; `dL/dv` is the tangential component
    /// `(g/||v||) (grad_w - <v_hat, grad_w> v_hat)`.
    pub fn backward_into(&self, grad_w: &DenseTensor, acc: &mut WeightNormGrads) -> Result<()> {
        if grad_w.shape() != self.v.shape() {
            return Err(Error::shape(
                "weight-norm backward upstream gradient",
                format!("{:?}", self.v.shape()),
                format!("{:?}", grad_w.shape()),
            ));
        }
        let n = frobenius_norm(&self.v);
        if n < f64::MIN_POSITIVE {
            return Err(Error::InvalidArgument(
                "weight-norm direction tensor must not be all zeros".into(),
            ));
        }
        let vd = self.v.data();
        let gd = grad_w.data();
        let radial = crate::tensor::dot(vd, gd) / n;
        acc.g += radial;
        let s = self.g / n;
        for ((a, &v), &g) in acc.v.data_mut().iter_mut().zip(vd).zip(gd) {
            *a += s * (g - radial * v / n);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{random_cp, LambdaInit};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_param(shape: &[usize], rank: usize, seed: u64) -> CpNormParam {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cp = random_cp(shape, rank, LambdaInit::StdNormal, &mut rng).unwrap();
        // Leave the columns deliberately un-normalized to exercise the norms
        // in the chain rule.
        for f in cp.factors_mut() {
            for x in f.data_mut() {
                *x *= 1.0 + rng.random::<f64>();
            }
        }
        for l in cp.lambdas_mut() {
            if l.abs() < 0.1 {
                *l += 0.5;
            }
        }
        CpNormParam::new(cp, 0.7 + rng.random::<f64>()).unwrap()
    }

    /// Central finite difference of `f` at the given scalar slot.
    fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn loss(p: &CpNormParam, probe: &DenseTensor) -> f64 {
        crate::tensor::dot(p.weight().unwrap().data(), probe.data())
    }

    #[test]
    fn weight_normalizes_columns_inside_the_sum() {
        // sigma=1, R=1, columns [3,0] and [0,4]: magnitudes 3 and 4 are
        // removed by the per-column normalization.
        let cp = CpForm::new(
            vec![
                Matrix::new(2, 1, vec![3.0, 0.0]).unwrap(),
                Matrix::new(2, 1, vec![0.0, 4.0]).unwrap(),
            ],
            vec![1.0],
        )
        .unwrap();
        let p = CpNormParam::new(cp, 1.0).unwrap();
        let w = p.weight().unwrap();
        assert_eq!(w.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn weight_is_linear_in_sigma() {
        let p1 = random_param(&[3, 4, 2], 3, 9);
        let mut p2 = p1.clone();
        p2.sigma = 2.0 * p1.sigma;
        let w1 = p1.weight().unwrap();
        let w2 = p2.weight().unwrap();
        for (a, b) in w1.data().iter().zip(w2.data()) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn weight_invariant_under_column_rescaling() {
        let p = random_param(&[4, 3, 3], 5, 11);
        let mut scaled = p.clone();
        for (k, f) in scaled.cp.factors_mut().iter_mut().enumerate() {
            for i in 0..f.rows() {
                for (r, x) in f.row_mut(i).iter_mut().enumerate() {
                    *x *= 0.2 + ((k + r) as f64);
                }
            }
        }
        let a = p.weight().unwrap();
        let b = scaled.weight().unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_relative_eq!(x, y, max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_column_is_rejected() {
        let cp = CpForm::new(
            vec![
                Matrix::new(2, 1, vec![0.0, 0.0]).unwrap(),
                Matrix::new(2, 1, vec![0.0, 4.0]).unwrap(),
            ],
            vec![1.0],
        )
        .unwrap();
        let p = CpNormParam::new(cp, 1.0).unwrap();
        assert!(matches!(
            p.weight(),
            Err(Error::ZeroColumn { mode: 0, rank: 0, .. })
        ));
    }

    #[test]
    fn backward_of_zero_gradient_is_zero() {
        let p = random_param(&[3, 4, 3], 4, 3);
        let g = p.backward(&DenseTensor::zeros(&[3, 4, 3])).unwrap();
        assert_eq!(g.sigma, 0.0);
        assert!(g.lambdas.iter().all(|&x| x == 0.0));
        assert!(g.factors.iter().all(|f| f.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let shape = [3, 4, 3, 3];
        let p = random_param(&shape, 5, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut probe = DenseTensor::zeros(&shape);
        for x in probe.data_mut() {
            *x = rng.random::<f64>() - 0.5;
        }
        let analytic = p.backward(&probe).unwrap();
        let h = 1e-5;
        let tol = 1e-4;

        let fd_sigma = central_diff(
            |s| {
                let mut q = p.clone();
                q.sigma = s;
                loss(&q, &probe)
            },
            p.sigma,
            h,
        );
        assert_relative_eq!(analytic.sigma, fd_sigma, max_relative = tol);

        for r in 0..p.cp.rank() {
            let base = p.cp.lambdas()[r];
            let fd = central_diff(
                |l| {
                    let mut q = p.clone();
                    q.cp.lambdas_mut()[r] = l;
                    loss(&q, &probe)
                },
                base,
                h,
            );
            assert_relative_eq!(analytic.lambdas[r], fd, max_relative = tol);
        }

        for k in 0..shape.len() {
            for i in 0..shape[k] {
                for r in 0..p.cp.rank() {
                    let base = p.cp.factors()[k].at(i, r);
                    let fd = central_diff(
                        |x| {
                            let mut q = p.clone();
                            *q.cp.factors_mut()[k].at_mut(i, r) = x;
                            loss(&q, &probe)
                        },
                        base,
                        h,
                    );
                    let an = analytic.factors[k].at(i, r);
                    if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                        assert_relative_eq!(an, fd, max_relative = tol);
                    }
                }
            }
        }
    }

    #[test]
    fn factor_gradient_has_no_radial_component() {
        let p = random_param(&[4, 3, 2], 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut probe = DenseTensor::zeros(&[4, 3, 2]);
        for x in probe.data_mut() {
            *x = rng.random::<f64>() - 0.5;
        }
        let g = p.backward(&probe).unwrap();
        for (k, f) in p.cp.factors().iter().enumerate() {
            for r in 0..p.cp.rank() {
                let mut radial = 0.0;
                let mut norm = 0.0;
                for i in 0..f.rows() {
                    radial += f.at(i, r) * g.factors[k].at(i, r);
                    norm += f.at(i, r) * f.at(i, r);
                }
                assert!(
                    (radial / norm.sqrt()).abs() < 1e-10,
                    "radial leak at mode {k} term {r}: {radial}"
                );
            }
        }
    }

    #[test]
    fn weightnorm_identity_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v = DenseTensor::zeros(&[3, 2, 2]);
        for x in v.data_mut() {
            *x = rng.random::<f64>() - 0.5;
        }
        let n = frobenius_norm(&v);
        let p = WeightNormParam::new(v.clone(), n).unwrap();
        let w = p.weight().unwrap();
        for (a, b) in w.data().iter().zip(v.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }

        let mut scaled = v.clone();
        for x in scaled.data_mut() {
            *x *= 10.0;
        }
        let q = WeightNormParam::new(scaled, n).unwrap();
        let w2 = q.weight().unwrap();
        for (a, b) in w.data().iter().zip(w2.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }

        let zero_len = WeightNormParam::new(v, 0.0).unwrap();
        assert!(zero_len.weight().unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weightnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shape = [4, 3, 3];
        let mut v = DenseTensor::zeros(&shape);
        for x in v.data_mut() {
            *x = rng.random::<f64>() - 0.5;
        }
        let p = WeightNormParam::new(v, 1.3).unwrap();
        let mut probe = DenseTensor::zeros(&shape);
        for x in probe.data_mut() {
            *x = rng.random::<f64>() - 0.5;
        }

        let mut acc = WeightNormGrads::zeros_like(&p);
        p.backward_into(&probe, &mut acc).unwrap();

        let h = 1e-5;
        let loss = |p: &WeightNormParam| crate::tensor::dot(p.weight().unwrap().data(), probe.data());
        let fd_g = central_diff(
            |g| {
                let mut q = p.clone();
                q.g = g;
                loss(&q)
            },
            p.g,
            h,
        );
        assert_relative_eq!(acc.g, fd_g, max_relative = 1e-5);
        for i in 0..p.v.numel() {
            let base = p.v.data()[i];
            let fd = central_diff(
                |x| {
                    let mut q = p.clone();
                    q.v.data_mut()[i] = x;
                    loss(&q)
                },
                base,
                h,
            );
            let an = acc.v.data()[i];
            if fd.abs() > 1e-8 || an.abs() > 1e-8 {
                assert_relative_eq!(an, fd, max_relative = 1e-4);
            }
        }
    }
}
