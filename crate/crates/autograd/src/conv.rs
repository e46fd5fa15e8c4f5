//! 2-D convolution kernels built on im2col plus matrix multiplication.
//!
//! Patch matrices are laid out `[c_in * k * k, out_h * out_w]` so the
//! forward pass is a single `[c_out, c_in*k*k] x [c_in*k*k, out_h*out_w]`
//! product per sample. Backward recomputes the patch matrix instead of
//! caching it, trading FLOPs for memory.

use ndarray::{Array2, Array4, ArrayView3, ArrayView4, ArrayViewMut3};

/// Output spatial size for one axis.
pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "kernel {kernel} exceeds padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Gathers sliding-window patches of `x` (`[c, h, w]`) into a
/// `[c*k*k, oh*ow]` matrix. Out-of-bounds taps (from padding) read zero.
fn im2col(
    x: ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut out_row = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out_row[oi * ow + oj] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a `[c*k*k, oh*ow]` patch-gradient matrix back onto the
/// input gradient (`[c, h, w]`). Exact adjoint of [`im2col`].
fn col2im_acc(
    cols: &Array2<f64>,
    mut gx: ArrayViewMut3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = gx.dim();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let col_row = cols.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[[ci, ii as usize, jj as usize]] += col_row[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Convolution forward: `x [n, c_in, h, w]`, `w [c_out, c_in, k, k]`,
/// optional `b [c_out]`, square kernel, symmetric zero padding.
pub fn conv2d_forward(
    x: ArrayView4<f64>,
    w: ArrayView4<f64>,
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, h, win) = x.dim();
    let (c_out, wc_in, k, k2) = w.dim();
    assert_eq!(c_in, wc_in, "conv input channels {c_in} vs kernel {wc_in}");
    assert_eq!(k, k2, "conv kernel must be square");
    let oh = out_dim(h, k, stride, pad);
    let ow = out_dim(win, k, stride, pad);

    let w_mat = w
        .to_shape((c_out, c_in * k * k))
        .expect("kernel tensor is contiguous");
    let mut y = Array4::<f64>::zeros((n, c_out, oh, ow));
    for ni in 0..n {
        let cols = im2col(x.index_axis(ndarray::Axis(0), ni), k, stride, pad, oh, ow);
        let prod = w_mat.dot(&cols);
        let mut yn = y.index_axis_mut(ndarray::Axis(0), ni);
        let mut yv = yn
            .view_mut()
            .into_shape_with_order((c_out, oh * ow))
            .expect("fresh output is contiguous");
        yv.assign(&prod);
        if let Some(bias) = b {
            for co in 0..c_out {
                yv.row_mut(co).mapv_inplace(|v| v + bias[co]);
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel, and
/// bias given upstream gradient `gy [n, c_out, oh, ow]`.
pub fn conv2d_backward(
    x: ArrayView4<f64>,
    w: ArrayView4<f64>,
    gy: ArrayView4<f64>,
    stride: usize,
    pad: usize,
    want_gx: bool,
) -> (Option<Array4<f64>>, Array4<f64>, Vec<f64>) {
    let (n, c_in, h, win) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let (_, _, oh, ow) = gy.dim();

    let w_mat = w
        .to_shape((c_out, c_in * k * k))
        .expect("kernel tensor is contiguous");
    let mut gw_mat = Array2::<f64>::zeros((c_out, c_in * k * k));
    let mut gb = vec![0.0; c_out];
    let mut gx = want_gx.then(|| Array4::<f64>::zeros((n, c_in, h, win)));

    for ni in 0..n {
        let gyn = gy.index_axis(ndarray::Axis(0), ni);
        let gy_mat = gyn
            .to_shape((c_out, oh * ow))
            .expect("gradient tensor is contiguous");
        let cols = im2col(x.index_axis(ndarray::Axis(0), ni), k, stride, pad, oh, ow);
        gw_mat = gw_mat + gy_mat.dot(&cols.t());
        for co in 0..c_out {
            gb[co] += gy_mat.row(co).sum();
        }
        if let Some(gx) = gx.as_mut() {
            let gcols = w_mat.t().dot(&gy_mat);
            col2im_acc(
                &gcols,
                gx.index_axis_mut(ndarray::Axis(0), ni),
                k,
                stride,
                pad,
                oh,
                ow,
            );
        }
    }
    let gw = gw_mat
        .into_shape_with_order((c_out, c_in, k, k))
        .expect("kernel gradient reshape");
    (gx, gw, gb)
}
