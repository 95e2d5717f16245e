//! Dense tensors and the unfolding / Khatri-Rao machinery used by the CP
//! routines.
//!
//! Storage is row-major throughout: the last index varies fastest in memory.
//! Unfoldings use the convention where mode `n` becomes the row index and the
//! remaining indices enumerate columns with the *lowest* surviving mode
//! varying fastest, i.e. column `j = sum_{k != n} i_k * J_k` with
//! `J_k = prod_{l < k, l != n} d_l`. The matching Khatri-Rao product for a
//! mode-`n` least-squares solve therefore takes the other factors in
//! *descending* mode order (see [`khatri_rao`], which makes the columns of
//! its first argument vary slowest).

mod linalg;

pub use linalg::{gemm, gemm_nt, gemm_tn, jacobi_eigh, solve_gram, Matrix};

use crate::{Error, Result};

/// Dense multi-way array with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Builds a tensor from a shape and matching flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape("DenseTensor::new", numel, data.len()));
        }
        Ok(DenseTensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Row-major strides (last index fastest).
    pub fn strides(&self) -> Vec<usize> {
        strides_row_major(&self.shape)
    }

    /// Element access by multi-index; intended for tests and small tensors.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn at_mut(&mut self, index: &[usize]) -> &mut f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        &mut self.data[flat]
    }
}

pub(crate) fn strides_row_major(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

/// Outer product of one vector per mode; the result has one axis per vector.
///
/// `outer_product(&[a, b])[i, j] = a[i] * b[j]`.
pub fn outer_product(vectors: &[Vec<f64>]) -> Result<DenseTensor> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("outer_product of no vectors".into()));
    }
    if vectors.iter().any(|v| v.is_empty()) {
        return Err(Error::InvalidArgument(
            "outer_product with an empty vector".into(),
        ));
    }
    // Row-major layout makes this a chain of Kronecker products with the
    // first vector varying slowest.
    let mut acc = vec![1.0];
    for v in vectors {
        let mut next = Vec::with_capacity(acc.len() * v.len());
        for &a in &acc {
            for &b in v {
                next.push(a * b);
            }
        }
        acc = next;
    }
    let shape: Vec<usize> = vectors.iter().map(|v| v.len()).collect();
    DenseTensor::new(shape, acc)
}

/// Mode-`mode` unfolding: rows index the chosen mode, columns enumerate the
/// remaining indices with the lowest surviving mode varying fastest.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    let n = t.ndim();
    if mode >= n {
        return Err(Error::ModeOutOfRange { mode, ndim: n });
    }
    let rows = t.shape[mode];
    let cols = t.numel() / rows;
    let mut out = vec![0.0; rows * cols];
    let col_strides = unfold_col_strides(&t.shape, mode);
    let strides = t.strides();
    for (flat, &v) in t.data.iter().enumerate() {
        let mut col = 0usize;
        let mut row = 0usize;
        for k in 0..n {
            let i_k = (flat / strides[k]) % t.shape[k];
            if k == mode {
                row = i_k;
            } else {
                col += i_k * col_strides[k];
            }
        }
        out[row * cols + col] = v;
    }
    Matrix::new(rows, cols, out)
}

/// Inverse of [`unfold`]: rebuilds the tensor of `shape` from its mode-`mode`
/// unfolding.
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    let n = shape.len();
    if mode >= n {
        return Err(Error::ModeOutOfRange { mode, ndim: n });
    }
    let numel: usize = shape.iter().product();
    if m.rows() != shape[mode] || m.rows() * m.cols() != numel {
        return Err(Error::shape(
            "fold",
            format!("{}x{}", shape[mode], numel / shape[mode]),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    let mut t = DenseTensor::zeros(shape);
    let col_strides = unfold_col_strides(shape, mode);
    let strides = t.strides();
    let cols = m.cols();
    for flat in 0..numel {
        let mut col = 0usize;
        let mut row = 0usize;
        for k in 0..n {
            let i_k = (flat / strides[k]) % shape[k];
            if k == mode {
                row = i_k;
            } else {
                col += i_k * col_strides[k];
            }
        }
        t.data[flat] = m.data()[row * cols + col];
    }
    Ok(t)
}

// Column strides of the mode-`mode` unfolding: the lowest non-mode index
// varies fastest, so stride grows with preceding non-mode extents.
fn unfold_col_strides(shape: &[usize], mode: usize) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for k in 0..shape.len() {
        if k == mode {
            continue;
        }
        strides[k] = acc;
        acc *= shape[k];
    }
    strides
}

/// Column-wise Khatri-Rao product. All inputs must share a column count; the
/// result has `prod(rows_i)` rows, and within each column the *first* input's
/// entries vary slowest (Kronecker order).
pub fn khatri_rao(mats: &[&Matrix]) -> Result<Matrix> {
    let Some(first) = mats.first() else {
        return Err(Error::InvalidArgument("khatri_rao of no matrices".into()));
    };
    let r = first.cols();
    for m in mats {
        if m.cols() != r {
            return Err(Error::shape("khatri_rao column count", r, m.cols()));
        }
    }
    let total_rows: usize = mats.iter().map(|m| m.rows()).product();
    let mut acc = vec![1.0; r];
    let mut acc_rows = 1usize;
    let mut next = Vec::new();
    for m in mats {
        next.clear();
        next.reserve(acc_rows * m.rows() * r);
        for i in 0..acc_rows {
            let a = &acc[i * r..(i + 1) * r];
            for j in 0..m.rows() {
                let b = m.row(j);
                next.extend(a.iter().zip(b).map(|(x, y)| x * y));
            }
        }
        std::mem::swap(&mut acc, &mut next);
        acc_rows *= m.rows();
    }
    debug_assert_eq!(acc_rows, total_rows);
    Matrix::new(total_rows, r, acc)
}

/// Frobenius norm: square root of the sum of squared entries.
pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Euclidean norm of a flat slice.
pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
