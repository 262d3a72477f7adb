//! Independent reference computations used by the test suite and by
//! `insloc selfcheck`. Nothing here shares code with the kernels it checks:
//! every routine is a direct, slow evaluation of the defining formula.

use crate::boxes::BBox;
use crate::tensor::{Scalar, Tensor};

/// Direct 6-loop cross-correlation, `[B,C,H,W] ⋆ [O,C,K,K] + bias`.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, o, ho, wo]);
    for n in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((n * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Central finite-difference gradient of a scalar objective w.r.t. every
/// element of `x`.
pub fn finite_difference<T: Scalar>(x: &Tensor<T>, h: f64, mut objective: impl FnMut(&Tensor<T>) -> f64) -> Tensor<T> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let plus = objective(&probe);
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let minus = objective(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = T::from_f64((plus - minus) / (2.0 * h));
    }
    grad
}

/// Largest `|a − n| / max(|a|, |n|)` over entries where `|analytic| > 1e-8`.
/// Entries below that floor must agree to within `1e-8` absolutely.
pub fn max_rel_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            if a.abs() > 1e-8 {
                (a - n).abs() / a.abs().max(n.abs())
            } else if (a - n).abs() > 1e-8 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish. Insensitive to
/// finite-difference noise on individually tiny entries.
pub fn rel_norm_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let norm = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a.as_f64() - n.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Value of the zero-extended bilinear field of one `[H, W]` plane at a
/// continuous point, written as a sum of tent functions over every cell.
pub fn bilinear_field(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..h {
        let wy = (1.0 - (y - i as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for j in 0..w {
            let wx = (1.0 - (x - j as f64).abs()).max(0.0);
            acc += wy * wx * plane[i * w + j];
        }
    }
    acc
}

/// Dense RoIAlign reference: average of the bilinear field over an `s×s`
/// lattice inside each of the `P×P` bins. Returns `[C, P, P]`.
pub fn dense_roi_align(
    fmap: &Tensor<f64>,
    batch_index: usize,
    bbox: &BBox,
    pooled: usize,
    samples: usize,
    spatial_scale: f64,
    aligned: bool,
) -> Tensor<f64> {
    let (c, h, w) = (fmap.dim(1), fmap.dim(2), fmap.dim(3));
    let offset = if aligned { 0.5 } else { 0.0 };
    let y0 = bbox.y1 * spatial_scale - offset;
    let x0 = bbox.x1 * spatial_scale - offset;
    let bin_h = (bbox.y2 - bbox.y1) * spatial_scale / pooled as f64;
    let bin_w = (bbox.x2 - bbox.x1) * spatial_scale / pooled as f64;
    let image = fmap.outer(batch_index);
    let mut out = Tensor::zeros(&[c, pooled, pooled]);
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for py in 0..pooled {
            for px in 0..pooled {
                let mut acc = 0.0;
                for sy in 0..samples {
                    for sx in 0..samples {
                        let y = y0 + bin_h * (py as f64 + (sy as f64 + 0.5) / samples as f64);
                        let x = x0 + bin_w * (px as f64 + (sx as f64 + 0.5) / samples as f64);
                        acc += bilinear_field(plane, h, w, y, x);
                    }
                }
                out.data_mut()[(ch * pooled + py) * pooled + px] = acc / (samples * samples) as f64;
            }
        }
    }
    out
}

/// IoU by inclusion–exclusion over sorted interval endpoints.
pub fn iou_by_intervals(a: &BBox, b: &BBox) -> f64 {
    fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
        let mut pts = [(a0, 0), (a1, 0), (b0, 1), (b1, 1)];
        pts.sort_by(|p, q| p.0.total_cmp(&q.0));
        // Intervals overlap iff the two smallest endpoints come from different boxes.
        if pts[0].1 == pts[1].1 {
            0.0
        } else {
            pts[2].0 - pts[1].0
        }
    }
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

/// InfoNCE of a single query by the textbook formula, without any
/// stabilization.
pub fn info_nce_direct(q: &[f64], k_pos: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = (dot(q, k_pos) / tau).exp();
    let denom = pos + negatives.iter().map(|k| (dot(q, k) / tau).exp()).sum::<f64>();
    -(pos / denom).ln()
}
