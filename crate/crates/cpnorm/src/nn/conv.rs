//! 2-D cross-correlation with explicit forward and backward passes.
//!
//! The forward pass lowers each sample to a patch matrix (im2col) and runs a
//! single matrix product per sample; the backward pass reuses the same
//! lowering to produce both weight and input gradients.

use crate::tensor::{gemm_nt, gemm_tn, DenseTensor, Matrix};
use crate::{Error, Result};

/// Spatial geometry of a convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel;
        let p = self.padding;
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::shape(
                "conv2d kernel larger than padded input",
                format!("spatial >= {k}x{k}"),
                format!("{}x{} with padding {p}", h, w),
            ));
        }
        Ok((
            (h + 2 * p - k) / self.stride + 1,
            (w + 2 * p - k) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn check_input(geom: &ConvGeometry, input: &DenseTensor) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 4 || s[1] != geom.in_channels {
        return Err(Error::shape(
            "conv2d input",
            format!("N x {} x H x W", geom.in_channels),
            format!("{s:?}"),
        ));
    }
    Ok((s[0], s[2], s[3]))
}

fn check_weight(geom: &ConvGeometry, weight: &DenseTensor) -> Result<()> {
    let expect = [
        geom.out_channels,
        geom.in_channels,
        geom.kernel,
        geom.kernel,
    ];
    if weight.shape() != expect {
        return Err(Error::shape(
            "conv2d weight",
            format!("{expect:?}"),
            format!("{:?}", weight.shape()),
        ));
    }
    Ok(())
}

/// Writes the patch matrix for one sample: row `(c, ki, kj)`, column
/// `(oi, oj)`, entries read from the zero-padded input plane.
fn im2col(
    geom: &ConvGeometry,
    sample: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut Matrix,
) {
    let k = geom.kernel;
    let s = geom.stride;
    let p = geom.padding as isize;
    debug_assert_eq!(cols.rows(), geom.patch_len());
    debug_assert_eq!(cols.cols(), out_h * out_w);
    cols.data_mut().fill(0.0);
    for c in 0..geom.in_channels {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = cols.row_mut(row);
                for oi in 0..out_h {
                    let ii = (oi * s) as isize + ki as isize - p;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..out_w {
                        let jj = (oj * s) as isize + kj as isize - p;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * out_w + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch-matrix gradient back onto one input sample.
fn col2im_add(
    geom: &ConvGeometry,
    cols: &Matrix,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    sample: &mut [f64],
) {
    let k = geom.kernel;
    let s = geom.stride;
    let p = geom.padding as isize;
    for c in 0..geom.in_channels {
        let plane = &mut sample[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = cols.row(row);
                for oi in 0..out_h {
                    let ii = (oi * s) as isize + ki as isize - p;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..out_w {
                        let jj = (oj * s) as isize + kj as isize - p;
                        if jj >= 0 && jj < w as isize {
                            dst_row[jj as usize] += src[oi * out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation: input `N x C x H x W`, weight
/// `O x C x k x k`, output `N x O x H' x W'` with
/// `H' = (H + 2 pad - k) / stride + 1`.
pub fn conv2d_forward(
    input: &DenseTensor,
    weight: &DenseTensor,
    geom: &ConvGeometry,
) -> Result<DenseTensor> {
    let (n, h, w) = check_input(geom, input)?;
    check_weight(geom, weight)?;
    let (out_h, out_w) = geom.out_size(h, w)?;
    let o = geom.out_channels;
    let patch = geom.patch_len();
    let w_mat = Matrix::new(o, patch, weight.data().to_vec()).expect("weight is contiguous");

    let mut out = DenseTensor::zeros(&[n, o, out_h, out_w]);
    let in_stride = geom.in_channels * h * w;
    let out_stride = o * out_h * out_w;
    let mut cols = Matrix::zeros(patch, out_h * out_w);
    for i in 0..n {
        im2col(
            geom,
            &input.data()[i * in_stride..(i + 1) * in_stride],
            h,
            w,
            out_h,
            out_w,
            &mut cols,
        );
        // O x (H'W') = (O x patch) * (patch x H'W'); cols is transposed in
        // memory relative to gemm's second operand, so multiply against its
        // row-major layout directly.
        let prod = crate::tensor::gemm(&w_mat, &cols);
        out.data_mut()[i * out_stride..(i + 1) * out_stride].copy_from_slice(prod.data());
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to the input and the weight.
pub fn conv2d_backward(
    input: &DenseTensor,
    weight: &DenseTensor,
    geom: &ConvGeometry,
    grad_out: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor)> {
    let (n, h, w) = check_input(geom, input)?;
    check_weight(geom, weight)?;
    let (out_h, out_w) = geom.out_size(h, w)?;
    let o = geom.out_channels;
    let expect = [n, o, out_h, out_w];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv2d upstream gradient",
            format!("{expect:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let patch = geom.patch_len();
    let w_mat = Matrix::new(o, patch, weight.data().to_vec()).expect("weight is contiguous");

    let mut grad_input = DenseTensor::zeros(input.shape());
    let mut grad_w_mat = Matrix::zeros(o, patch);
    let in_stride = geom.in_channels * h * w;
    let out_stride = o * out_h * out_w;
    let mut cols = Matrix::zeros(patch, out_h * out_w);
    for i in 0..n {
        let g = Matrix::new(
            o,
            out_h * out_w,
            grad_out.data()[i * out_stride..(i + 1) * out_stride].to_vec(),
        )
        .expect("gradient is contiguous");
        im2col(
            geom,
            &input.data()[i * in_stride..(i + 1) * in_stride],
            h,
            w,
            out_h,
            out_w,
            &mut cols,
        );
        // dW += g * cols^T ; d(cols) = W^T * g, scattered back to the input.
        let gw = gemm_nt(&g, &cols);
        for (a, b) in grad_w_mat.data_mut().iter_mut().zip(gw.data()) {
            *a += b;
        }
        let gcols = gemm_tn(&w_mat, &g);
        col2im_add(
            geom,
            &gcols,
            h,
            w,
            out_h,
            out_w,
            &mut grad_input.data_mut()[i * in_stride..(i + 1) * in_stride],
        );
    }
    let grad_weight = DenseTensor::new(weight.shape().to_vec(), grad_w_mat.into_data())
        .expect("same element count as the weight");
    Ok((grad_input, grad_weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding,
        }
    }

    fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = DenseTensor::zeros(shape);
        for x in t.data_mut() {
            *x = rng.random::<f64>() - 0.5;
        }
        t
    }

    #[test]
    fn all_ones_kernel_sums_the_window() {
        let input = DenseTensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let weight = DenseTensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let out = conv2d_forward(&input, &weight, &geom(1, 1, 3, 1, 0)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn delta_kernel_with_padding_is_identity() {
        let input = random_tensor(&[2, 3, 5, 4], 3);
        let mut weight = DenseTensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            *weight.at_mut(&[c, c, 1, 1]) = 1.0;
        }
        let out = conv2d_forward(&input, &weight, &geom(3, 3, 3, 1, 1)).unwrap();
        assert_eq!(out.shape(), input.shape());
        for (a, b) in out.data().iter().zip(input.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn stride_two_shrinks_output() {
        let input = random_tensor(&[1, 2, 7, 7], 5);
        let weight = random_tensor(&[4, 2, 3, 3], 6);
        let out = conv2d_forward(&input, &weight, &geom(2, 4, 3, 2, 0)).unwrap();
        assert_eq!(out.shape(), &[1, 4, 3, 3]);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let input = DenseTensor::zeros(&[1, 1, 2, 2]);
        let weight = DenseTensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_forward(&input, &weight, &geom(1, 1, 3, 1, 0)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = geom(3, 4, 3, 1, 1);
        let input = random_tensor(&[2, 3, 5, 5], 11);
        let weight = random_tensor(&[4, 3, 3, 3], 12);
        let probe = random_tensor(&[2, 4, 5, 5], 13);

        let loss = |input: &DenseTensor, weight: &DenseTensor| {
            let out = conv2d_forward(input, weight, &g).unwrap();
            crate::tensor::dot(out.data(), probe.data())
        };
        let (gi, gw) = conv2d_backward(&input, &weight, &g, &probe).unwrap();

        let h = 1e-5;
        let mut checked = 0;
        for idx in (0..input.numel()).step_by(7) {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.data_mut()[idx] += h;
            minus.data_mut()[idx] -= h;
            let fd = (loss(&plus, &weight) - loss(&minus, &weight)) / (2.0 * h);
            let an = gi.data()[idx];
            if fd.abs() > 1e-8 || an.abs() > 1e-8 {
                assert_relative_eq!(an, fd, max_relative = 1e-4);
                checked += 1;
            }
        }
        for idx in (0..weight.numel()).step_by(5) {
            let mut plus = weight.clone();
            let mut minus = weight.clone();
            plus.data_mut()[idx] += h;
            minus.data_mut()[idx] -= h;
            let fd = (loss(&input, &plus) - loss(&input, &minus)) / (2.0 * h);
            let an = gw.data()[idx];
            if fd.abs() > 1e-8 || an.abs() > 1e-8 {
                assert_relative_eq!(an, fd, max_relative = 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 20, "too few informative gradient probes");
    }

    #[test]
    fn strided_backward_matches_finite_differences() {
        let g = geom(2, 3, 3, 2, 1);
        let input = random_tensor(&[1, 2, 6, 6], 21);
        let weight = random_tensor(&[3, 2, 3, 3], 22);
        let out = conv2d_forward(&input, &weight, &g).unwrap();
        let probe = random_tensor(out.shape(), 23);

        let loss = |input: &DenseTensor, weight: &DenseTensor| {
            let out = conv2d_forward(input, weight, &g).unwrap();
            crate::tensor::dot(out.data(), probe.data())
        };
        let (gi, gw) = conv2d_backward(&input, &weight, &g, &probe).unwrap();
        let h = 1e-5;
        for idx in (0..input.numel()).step_by(5) {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.data_mut()[idx] += h;
            minus.data_mut()[idx] -= h;
            let fd = (loss(&plus, &weight) - loss(&minus, &weight)) / (2.0 * h);
            let an = gi.data()[idx];
            if fd.abs() > 1e-8 || an.abs() > 1e-8 {
                assert_relative_eq!(an, fd, max_relative = 1e-4);
            }
        }
        for idx in 0..weight.numel() {
            let mut plus = weight.clone();
            let mut minus = weight.clone();
            plus.data_mut()[idx] += h;
            minus.data_mut()[idx] -= h;
            let fd = (loss(&input, &plus) - loss(&input, &minus)) / (2.0 * h);
            assert_relative_eq!(gw.data()[idx], fd, max_relative = 1e-4);
        }
    }
}
