//! Row-major dense matrices and the small amount of dense linear algebra the
//! decomposition routines need: gemm wrappers, a blocked Cholesky solver for
//! the Gram systems arising in alternating least squares, and a Jacobi
//! eigendecomposition backing the pseudo-inverse fallback.

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, &x) in v.iter().enumerate() {
            *self.at_mut(i, j) = x;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    /// Entrywise product, in place.
    pub fn hadamard_in_place(&mut self, other: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "hadamard dimension mismatch"
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
    }

    /// Euclidean norms of each column.
    pub fn col_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, &x) in self.row(i).iter().enumerate() {
                sq[j] += x * x;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }
}

// gemm on raw row-major views; the single unsafe funnel for matrixmultiply.
#[allow(clippy::too_many_arguments)]
fn dgemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            for x in c.iter_mut() {
                *x *= beta;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// `A * B`.
pub fn gemm(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let mut c = Matrix::zeros(a.rows, b.cols);
    dgemm_view(
        a.rows, a.cols, b.cols, 1.0, &a.data, a.cols as isize, 1, &b.data, b.cols as isize, 1, 0.0,
        &mut c.data, b.cols as isize, 1,
    );
    c
}

/// `A * B^T`.
pub fn gemm_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "gemm_nt inner dimension mismatch");
    let mut c = Matrix::zeros(a.rows, b.rows);
    dgemm_view(
        a.rows, a.cols, b.rows, 1.0, &a.data, a.cols as isize, 1, &b.data, 1, b.cols as isize, 0.0,
        &mut c.data, b.rows as isize, 1,
    );
    c
}

/// `A^T * B`.
pub fn gemm_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "gemm_tn inner dimension mismatch");
    let mut c = Matrix::zeros(a.cols, b.cols);
    dgemm_view(
        a.cols, a.rows, b.cols, 1.0, &a.data, 1, a.cols as isize, &b.data, b.cols as isize, 1, 0.0,
        &mut c.data, b.cols as isize, 1,
    );
    c
}

const CHOL_BLOCK: usize = 64;

// In-place blocked Cholesky of the symmetric matrix held in `a` (row-major,
// n x n). On success the lower triangle holds L. Returns false when a pivot
// drops below the positive-definiteness threshold.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    let mut max_diag = 0.0f64;
    for i in 0..n {
        max_diag = max_diag.max(a[i * n + i].abs());
    }
    let tiny = max_diag * (n as f64) * f64::EPSILON * 16.0;

    let mut j = 0;
    while j < n {
        let jb = CHOL_BLOCK.min(n - j);
        // Diagonal block, unblocked.
        for p in j..j + jb {
            let mut d = a[p * n + p];
            for k in j..p {
                d -= a[p * n + k] * a[p * n + k];
            }
            if !(d > tiny) || !d.is_finite() {
                return false;
            }
            let lpp = d.sqrt();
            a[p * n + p] = lpp;
            for q in p + 1..j + jb {
                let mut s = a[q * n + p];
                for k in j..p {
                    s -= a[q * n + k] * a[p * n + k];
                }
                a[q * n + p] = s / lpp;
            }
        }
        let rest = j + jb;
        if rest < n {
            // L21 = A21 * L11^{-T}: row-wise forward substitution.
            for q in rest..n {
                for p in j..j + jb {
                    let mut s = a[q * n + p];
                    for k in j..p {
                        s -= a[q * n + k] * a[p * n + k];
                    }
                    a[q * n + p] = s / a[p * n + p];
                }
            }
            // Trailing update A22 -= L21 * L21^T (full square via gemm; the
            // upper half is scratch and never read).
            let m = n - rest;
            let (head, tail) = a.split_at_mut(rest * n);
            let _ = head;
            // Views into the same buffer: L21 starts at row `rest`, col `j`;
            // A22 starts at row `rest`, col `rest`. Both live in `tail`.
            let l21_off = j;
            let a22_off = rest;
            // Safety: gemm reads L21 and writes A22; the column ranges
            // [j, j+jb) and [rest, n) are disjoint since rest = j + jb.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    jb,
                    m,
                    -1.0,
                    tail.as_ptr().add(l21_off),
                    n as isize,
                    1,
                    tail.as_ptr().add(l21_off),
                    1,
                    n as isize,
                    1.0,
                    tail.as_mut_ptr().add(a22_off),
                    n as isize,
                    1,
                );
            }
        }
        j += jb;
    }
    true
}

// Solves V x = b for every row b of `rhs` (d x n), with V = L L^T given by
// the lower-triangular `l` (n x n row-major). Overwrites `rhs` with the
// solutions. Column-blocked so the bulk of the work runs through gemm.
fn cholesky_solve_rows(l: &[f64], n: usize, rhs: &mut Matrix) {
    assert_eq!(rhs.cols, n);
    let d = rhs.rows;
    if d == 0 || n == 0 {
        return;
    }
    let nb = CHOL_BLOCK;
    // Forward pass: Z L^T = B over columns ascending (row-RHS layout turns
    // L z = b into a right-solve against L^T).
    let mut p = 0;
    while p < n {
        let pb = nb.min(n - p);
        if p > 0 {
            // B[:, p..p+pb] -= Z[:, 0..p] * L[p..p+pb, 0..p]^T. Reads and
            // writes touch disjoint column ranges of the same buffer.
            unsafe {
                matrixmultiply::dgemm(
                    d,
                    p,
                    pb,
                    -1.0,
                    rhs.data.as_ptr(),
                    n as isize,
                    1,
                    l.as_ptr().add(p * n),
                    1,
                    n as isize,
                    1.0,
                    rhs.data.as_mut_ptr().add(p),
                    n as isize,
                    1,
                );
            }
        }
        for c in p..p + pb {
            let pivot = l[c * n + c];
            for r in 0..d {
                let row = &mut rhs.data[r * n..r * n + p + pb];
                let mut s = row[c];
                for k in p..c {
                    s -= row[k] * l[c * n + k];
                }
                row[c] = s / pivot;
            }
        }
        p += pb;
    }
    // Backward pass: X L = Z over columns descending.
    let mut p_end = n;
    while p_end > 0 {
        let pb = nb.min(p_end);
        let p = p_end - pb;
        if p_end < n {
            // Z[:, p..p_end] -= X[:, p_end..n] * L[p_end..n, p..p_end].
            // Disjoint column ranges of the same buffer again.
            unsafe {
                matrixmultiply::dgemm(
                    d,
                    n - p_end,
                    pb,
                    -1.0,
                    rhs.data.as_ptr().add(p_end),
                    n as isize,
                    1,
                    l.as_ptr().add(p_end * n + p),
                    n as isize,
                    1,
                    1.0,
                    rhs.data.as_mut_ptr().add(p),
                    n as isize,
                    1,
                );
            }
        }
        for c in (p..p_end).rev() {
            let pivot = l[c * n + c];
            for r in 0..d {
                let row = &mut rhs.data[r * n..r * n + p_end];
                let mut s = row[c];
                for k in c + 1..p_end {
                    s -= row[k] * l[k * n + c];
                }
                row[c] = s / pivot;
            }
        }
        p_end = p;
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in columns,
/// sorted by descending eigenvalue.
pub fn jacobi_eigh(a: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(a.rows, a.cols, "jacobi_eigh needs a square matrix");
    let n = a.rows;
    let mut m = a.data.clone();
    let mut v = Matrix::identity(n);
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frob == 0.0 {
        return (vec![0.0; n], v);
    }
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-14 * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v.data[k * n + p];
                    let vkq = v.data[k * n + q];
                    v.data[k * n + p] = c * vkp - s * vkq;
                    v.data[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let eigs: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| eigs[j].partial_cmp(&eigs[i]).unwrap());
    let sorted_eigs: Vec<f64> = order.iter().map(|&i| eigs[i]).collect();
    let mut sorted_v = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            sorted_v.data[i * n + new_j] = v.data[i * n + old_j];
        }
    }
    (sorted_eigs, sorted_v)
}

/// Solves `F * V = M` for `F`, where `V` (r x r) is a symmetric positive
/// semidefinite Gram-type matrix and `M` is d x r.
///
/// Takes a Cholesky fast path; if `V` is rank deficient, falls back to a
/// pseudo-inverse built from a Jacobi eigendecomposition, dropping
/// eigenvalues below `1e-10 * lambda_max`. Never aborts on singular input.
pub fn solve_gram(v: &Matrix, m: &Matrix) -> Result<Matrix> {
    if v.rows != v.cols {
        return Err(Error::shape(
            "solve_gram V",
            "square",
            format!("{}x{}", v.rows, v.cols),
        ));
    }
    if m.cols != v.rows {
        return Err(Error::shape("solve_gram M columns", v.rows, m.cols));
    }
    let n = v.rows;
    let mut chol = v.data.clone();
    if cholesky_in_place(&mut chol, n) {
        let mut x = m.clone();
        cholesky_solve_rows(&chol, n, &mut x);
        return Ok(x);
    }
    // Rank-deficient: F = M * pinv(V) via eigendecomposition.
    let (eigs, u) = jacobi_eigh(v);
    let lambda_max = eigs.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = lambda_max * 1e-10;
    let mu = gemm(m, &u); // d x n
    let mut scaled = mu;
    for i in 0..scaled.rows {
        for (j, x) in scaled.row_mut(i).iter_mut().enumerate() {
            if eigs[j] > cutoff && eigs[j] > 0.0 {
                *x /= eigs[j];
            } else {
                *x = 0.0;
            }
        }
    }
    Ok(gemm_nt(&scaled, &u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn naive_mul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for k in 0..a.cols() {
                let aik = a.at(i, k);
                for j in 0..b.cols() {
                    *c.at_mut(i, j) += aik * b.at(k, j);
                }
            }
        }
        c
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gemm_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 8);
        let b = random_matrix(&mut rng, 8, 3);
        let c = gemm(&a, &b);
        let want = naive_mul(&a, &b);
        for (x, y) in c.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = b.transpose();
        let c2 = gemm_nt(&a, &bt);
        for (x, y) in c2.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = a.transpose();
        let c3 = gemm_tn(&at, &b);
        for (x, y) in c3.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_gram_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 3, 17, 90, 150] {
            let b = random_matrix(&mut rng, n + 5, n);
            let mut v = gemm_tn(&b, &b);
            for i in 0..n {
                *v.at_mut(i, i) += 0.5;
            }
            let truth = random_matrix(&mut rng, 4, n);
            let m = gemm(&truth, &v);
            let f = solve_gram(&v, &m).unwrap();
            for (x, y) in f.data().iter().zip(truth.data()) {
                assert!((x - y).abs() < 1e-8, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn solve_gram_rank_deficient_consistent_system() {
        // V = b b^T has rank 1; a consistent system must still be solved.
        let b = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let v = gemm_nt(&b, &b);
        let truth = Matrix::new(2, 3, vec![1.0, 0.0, 0.5, -1.0, 0.25, 0.0]).unwrap();
        let m = gemm(&truth, &v);
        let f = solve_gram(&v, &m).unwrap();
        let recon = gemm(&f, &v);
        for (x, y) in recon.data().iter().zip(m.data()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn solve_gram_zero_matrix_gives_zero() {
        let v = Matrix::zeros(4, 4);
        let m = Matrix::from_fn(2, 4, |i, j| (i + j) as f64);
        let f = solve_gram(&v, &m).unwrap();
        assert!(f.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        // Diagonalizable by hand: [[2, 1], [1, 2]] has eigenvalues 3 and 1.
        let a = Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (eigs, u) = jacobi_eigh(&a);
        assert!((eigs[0] - 3.0).abs() < 1e-12);
        assert!((eigs[1] - 1.0).abs() < 1e-12);
        // U diag(eigs) U^T reconstructs A.
        let mut ud = u.clone();
        for i in 0..2 {
            for j in 0..2 {
                *ud.at_mut(i, j) *= eigs[j];
            }
        }
        let recon = gemm_nt(&ud, &u);
        for (x, y) in recon.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_larger_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 24;
        let b = random_matrix(&mut rng, n, n);
        let mut a = gemm_tn(&b, &b);
        let a0 = a.clone();
        // Symmetrize exactly against accumulated round-off.
        for i in 0..n {
            for j in 0..n {
                *a.at_mut(i, j) = 0.5 * (a0.at(i, j) + a0.at(j, i));
            }
        }
        let (eigs, u) = jacobi_eigh(&a);
        assert!(eigs.windows(2).all(|w| w[0] >= w[1] - 1e-9));
        let mut ud = u.clone();
        for i in 0..n {
            for j in 0..n {
                *ud.at_mut(i, j) *= eigs[j];
            }
        }
        let recon = gemm_nt(&ud, &u);
        let scale = a.frob_norm();
        for (x, y) in recon.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-10 * scale);
        }
    }
}
