//! Bilinear resampling and 2x average pooling on `[n, c, h, w]` tensors.
//!
//! Bilinear coordinates follow the half-pixel convention: output pixel
//! center `o + 0.5` maps to input coordinate `(o + 0.5) * in/out - 0.5`,
//! clamped to the valid range. Forward and backward share one tap table
//! per axis so the backward pass is the exact adjoint.

use ndarray::{Array4, ArrayView4};

/// One output position's two input taps and their weights.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    assert!(in_len > 0 && out_len > 0, "resample axis must be non-empty");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

/// Resizes to `(out_h, out_w)`.
pub fn bilinear_forward(x: ArrayView4<f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut y = Array4::<f64>::zeros((n, c, out_h, out_w));
    for ni in 0..n {
        for ci in 0..c {
            for (oi, r) in rows.iter().enumerate() {
                for (oj, cc) in cols.iter().enumerate() {
                    let top = x[[ni, ci, r.lo, cc.lo]] * (1.0 - cc.w_hi)
                        + x[[ni, ci, r.lo, cc.hi]] * cc.w_hi;
                    let bot = x[[ni, ci, r.hi, cc.lo]] * (1.0 - cc.w_hi)
                        + x[[ni, ci, r.hi, cc.hi]] * cc.w_hi;
                    y[[ni, ci, oi, oj]] = top * (1.0 - r.w_hi) + bot * r.w_hi;
                }
            }
        }
    }
    y
}

/// Scatters output gradient back through the same tap weights.
pub fn bilinear_backward(gy: ArrayView4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (n, c, out_h, out_w) = gy.dim();
    let rows = axis_taps(in_h, out_h);
    let cols = axis_taps(in_w, out_w);
    let mut gx = Array4::<f64>::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            for (oi, r) in rows.iter().enumerate() {
                for (oj, cc) in cols.iter().enumerate() {
                    let g = gy[[ni, ci, oi, oj]];
                    gx[[ni, ci, r.lo, cc.lo]] += g * (1.0 - r.w_hi) * (1.0 - cc.w_hi);
                    gx[[ni, ci, r.lo, cc.hi]] += g * (1.0 - r.w_hi) * cc.w_hi;
                    gx[[ni, ci, r.hi, cc.lo]] += g * r.w_hi * (1.0 - cc.w_hi);
                    gx[[ni, ci, r.hi, cc.hi]] += g * r.w_hi * cc.w_hi;
                }
            }
        }
    }
    gx
}

/// Non-overlapping 2x2 mean pooling. Requires even spatial dims.
pub fn avgpool2_forward(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims, got {h}x{w}");
    let mut y = Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..h / 2 {
                for oj in 0..w / 2 {
                    y[[ni, ci, oi, oj]] = 0.25
                        * (x[[ni, ci, 2 * oi, 2 * oj]]
                            + x[[ni, ci, 2 * oi, 2 * oj + 1]]
                            + x[[ni, ci, 2 * oi + 1, 2 * oj]]
                            + x[[ni, ci, 2 * oi + 1, 2 * oj + 1]]);
                }
            }
        }
    }
    y
}

pub fn avgpool2_backward(gy: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, oh, ow) = gy.dim();
    let mut gx = Array4::<f64>::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = 0.25 * gy[[ni, ci, oi, oj]];
                    gx[[ni, ci, 2 * oi, 2 * oj]] = g;
                    gx[[ni, ci, 2 * oi, 2 * oj + 1]] = g;
                    gx[[ni, ci, 2 * oi + 1, 2 * oj]] = g;
                    gx[[ni, ci, 2 * oi + 1, 2 * oj + 1]] = g;
                }
            }
        }
    }
    gx
}
