//! Stateless layer arithmetic: linear maps, 2x2 max pooling, ReLU,
//! inverted dropout, flattening, and the softmax cross-entropy head.
//!
//! Each function is pure; the caching needed to connect forward and backward
//! passes (masks, argmax indices, saved inputs) is owned by the layer
//! structures in the parent module.

use crate::tensor::{gemm, gemm_nt, gemm_tn, DenseTensor, Matrix};
use crate::{Error, Result};
use rand::Rng;

fn as_matrix(t: &DenseTensor, context: &'static str) -> Result<Matrix> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::shape(context, "a 2-mode tensor", format!("{s:?}")));
    }
    Ok(Matrix::new(s[0], s[1], t.data().to_vec()).expect("contiguous"))
}

/// `out = input * weight^T + bias`; input `N x F`, weight `O x F`.
pub fn linear_forward(
    input: &DenseTensor,
    weight: &DenseTensor,
    bias: Option<&[f64]>,
) -> Result<DenseTensor> {
    let x = as_matrix(input, "linear input")?;
    let w = as_matrix(weight, "linear weight")?;
    if x.cols() != w.cols() {
        return Err(Error::shape(
            "linear input features",
            w.cols(),
            x.cols(),
        ));
    }
    let mut out = gemm_nt(&x, &w);
    if let Some(b) = bias {
        if b.len() != w.rows() {
            return Err(Error::shape("linear bias", w.rows(), b.len()));
        }
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(b) {
                *o += bb;
            }
        }
    }
    let n = x.rows();
    let o = w.rows();
    DenseTensor::new(vec![n, o], out.into_data())
}

/// Gradients of [`linear_forward`]: `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    input: &DenseTensor,
    weight: &DenseTensor,
    grad_out: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, Vec<f64>)> {
    let x = as_matrix(input, "linear input")?;
    let w = as_matrix(weight, "linear weight")?;
    let g = as_matrix(grad_out, "linear upstream gradient")?;
    if g.rows() != x.rows() || g.cols() != w.rows() {
        return Err(Error::shape(
            "linear upstream gradient",
            format!("{} x {}", x.rows(), w.rows()),
            format!("{} x {}", g.rows(), g.cols()),
        ));
    }
    let grad_input = gemm(&g, &w);
    let grad_weight = gemm_tn(&g, &x);
    let mut grad_bias = vec![0.0; w.rows()];
    for i in 0..g.rows() {
        for (b, &v) in grad_bias.iter_mut().zip(g.row(i)) {
            *b += v;
        }
    }
    Ok((
        DenseTensor::new(vec![x.rows(), w.cols()], grad_input.into_data())?,
        DenseTensor::new(vec![w.rows(), w.cols()], grad_weight.into_data())?,
        grad_bias,
    ))
}

/// 2x2 max pooling with stride 2 on `N x C x H x W`; odd trailing rows or
/// columns are dropped. Returns the pooled tensor and, per output element,
/// the flat input index of its maximum for gradient routing.
pub fn maxpool2d_forward(input: &DenseTensor) -> Result<(DenseTensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "maxpool input",
            "N x C x H x W",
            format!("{s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "maxpool input spatial size",
            "at least 2x2",
            format!("{h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = DenseTensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let data = input.data();
    let out_data = out.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        let out_base = nc * oh * ow;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best_idx = base + (2 * oi) * w + 2 * oj;
                let mut best = data[best_idx];
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = base + (2 * oi + di) * w + 2 * oj + dj;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_data[out_base + oi * ow + oj] = best;
                argmax[out_base + oi * ow + oj] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream gradient element to the input position that won the
/// corresponding pooling window.
pub fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &DenseTensor,
) -> Result<DenseTensor> {
    if grad_out.numel() != argmax.len() {
        return Err(Error::shape(
            "maxpool upstream gradient",
            argmax.len(),
            grad_out.numel(),
        ));
    }
    let mut grad_input = DenseTensor::zeros(input_shape);
    let gd = grad_input.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    Ok(grad_input)
}

/// Elementwise `max(x, 0)`.
pub fn relu_forward(input: &DenseTensor) -> DenseTensor {
    let mut out = input.clone();
    for x in out.data_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    out
}

/// Passes gradient only where the forward input was strictly positive.
pub fn relu_backward(input: &DenseTensor, grad_out: &DenseTensor) -> Result<DenseTensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu upstream gradient",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut g = grad_out.clone();
    for (gx, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gx = 0.0;
        }
    }
    Ok(g)
}

/// Inverted dropout: keeps each element with probability `keep` and scales
/// survivors by `1/keep`, so the expected activation is unchanged and
/// evaluation needs no compensation. Returns the output and the applied
/// scale mask (0 or `1/keep` per element).
pub fn dropout_forward(
    input: &DenseTensor,
    keep: f64,
    rng: &mut impl Rng,
) -> Result<(DenseTensor, Vec<f64>)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dropout keep probability must be in (0, 1], got {keep}"
        )));
    }
    let inv = 1.0 / keep;
    let mut mask = vec![0.0; input.numel()];
    for m in mask.iter_mut() {
        if rng.random::<f64>() < keep {
            *m = inv;
        }
    }
    let mut out = input.clone();
    for (x, &m) in out.data_mut().iter_mut().zip(&mask) {
        *x *= m;
    }
    Ok((out, mask))
}

/// Applies the forward pass's scale mask to the upstream gradient.
pub fn dropout_backward(mask: &[f64], grad_out: &DenseTensor) -> Result<DenseTensor> {
    if mask.len() != grad_out.numel() {
        return Err(Error::shape(
            "dropout upstream gradient",
            mask.len(),
            grad_out.numel(),
        ));
    }
    let mut g = grad_out.clone();
    for (gx, &m) in g.data_mut().iter_mut().zip(mask) {
        *gx *= m;
    }
    Ok(g)
}

/// Collapses all but the leading (batch) mode into one feature mode.
pub fn flatten_forward(input: &DenseTensor) -> Result<DenseTensor> {
    let s = input.shape();
    if s.len() < 2 {
        return Err(Error::shape(
            "flatten input",
            "at least 2 modes",
            format!("{s:?}"),
        ));
    }
    let n = s[0];
    let f: usize = s[1..].iter().product();
    DenseTensor::new(vec![n, f], input.data().to_vec())
}

/// Restores the pre-flatten shape on the gradient.
pub fn flatten_backward(input_shape: &[usize], grad_out: &DenseTensor) -> Result<DenseTensor> {
    DenseTensor::new(input_shape.to_vec(), grad_out.data().to_vec())
}

/// Mean softmax cross-entropy over a batch of logits `N x K` with integer
/// class labels; returns the loss and its gradient at the logits
/// (`(softmax - onehot) / N`), computed with the usual log-sum-exp shift.
pub fn softmax_cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape("softmax logits", "N x K", format!("{s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::shape("softmax labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = DenseTensor::zeros(&[n, k]);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &x in row {
            denom += (x - max).exp();
        }
        let lse = max + denom.ln();
        loss += (lse - row[labels[i]]) * inv_n;
        let grow = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (g, &x) in grow.iter_mut().zip(row) {
            *g = (x - lse).exp() * inv_n;
        }
        grow[labels[i]] -= inv_n;
    }
    Ok((loss, grad))
}
