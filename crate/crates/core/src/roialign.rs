//! RoIAlign: bilinear region pooling onto a fixed `P×P` grid, its adjoint,
//! and FPN level assignment.
//!
//! Sample points that fall outside the map read zeros: the field being
//! sampled is the zero-extended bilinear interpolant of the map, so forward
//! and backward are exact adjoints everywhere.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSpec {
    /// Output grid side `P`.
    pub pooled: usize,
    /// Samples per bin along each axis.
    pub samples: usize,
    /// Feature-map units per image pixel (`1 / stride`).
    pub spatial_scale: f64,
    /// Shift box coordinates by half a cell so pixel centres line up.
    pub aligned: bool,
}

impl RoiSpec {
    pub fn new(pooled: usize, samples: usize, stride: usize) -> Self {
        RoiSpec {
            pooled,
            samples,
            spatial_scale: 1.0 / stride as f64,
            aligned: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pooled == 0 || self.samples == 0 || !(self.spatial_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("roi spec {self:?}")));
        }
        Ok(())
    }
}

/// Neighbour taps `(flat index in plane, weight)` for every output bin.
struct SamplePlan {
    taps: Vec<Vec<(usize, f64)>>,
}

fn plan(bbox: &BBox, spec: &RoiSpec, h: usize, w: usize) -> Result<SamplePlan> {
    spec.validate()?;
    let offset = if spec.aligned { 0.5 } else { 0.0 };
    let x1 = bbox.x1 * spec.spatial_scale - offset;
    let y1 = bbox.y1 * spec.spatial_scale - offset;
    let x2 = bbox.x2 * spec.spatial_scale - offset;
    let y2 = bbox.y2 * spec.spatial_scale - offset;
    let (roi_w, roi_h) = (x2 - x1, y2 - y1);
    if !(roi_w > 0.0 && roi_h > 0.0) {
        return Err(Error::Degenerate(format!(
            "box {bbox:?} has extent {roi_w}x{roi_h} on the feature map"
        )));
    }
    let p = spec.pooled;
    let s = spec.samples;
    let bin_w = roi_w / p as f64;
    let bin_h = roi_h / p as f64;
    let norm = 1.0 / (s * s) as f64;
    // 1-D taps along one axis: (index, weight) pairs inside the map.
    let axis = |coord: f64, len: usize| -> [(usize, f64); 2] {
        let lo = coord.floor();
        let frac = coord - lo;
        let lo = lo as isize;
        let mut out = [(0, 0.0); 2];
        for (k, (idx, wt)) in [(lo, 1.0 - frac), (lo + 1, frac)].into_iter().enumerate() {
            if idx >= 0 && (idx as usize) < len {
                out[k] = (idx as usize, wt);
            }
        }
        out
    };
    let mut taps = Vec::with_capacity(p * p);
    for py in 0..p {
        for px in 0..p {
            let mut bin = Vec::with_capacity(4 * s * s);
            for sy in 0..s {
                let y = y1 + bin_h * (py as f64 + (sy as f64 + 0.5) / s as f64);
                let ys = axis(y, h);
                for sx in 0..s {
                    let x = x1 + bin_w * (px as f64 + (sx as f64 + 0.5) / s as f64);
                    let xs = axis(x, w);
                    for &(iy, wy) in &ys {
                        for &(ix, wx) in &xs {
                            let wt = wy * wx * norm;
                            if wt != 0.0 {
                                bin.push((iy * w + ix, wt));
                            }
                        }
                    }
                }
            }
            taps.push(bin);
        }
    }
    Ok(SamplePlan { taps })
}

fn check_map<T: Scalar>(fmap_shape: &[usize], batch_index: usize) -> Result<()> {
    if fmap_shape.len() != 4 || batch_index >= fmap_shape[0] {
        return Err(Error::InvalidArgument(format!(
            "batch index {batch_index} for feature map {fmap_shape:?}"
        )));
    }
    Ok(())
}

/// Pools `bbox` (image coordinates) from sample `batch_index` of a
/// `[B, C, H, W]` map into `[C, P, P]`.
pub fn roi_align_forward<T: Scalar>(
    fmap: &Tensor<T>,
    bbox: &BBox,
    batch_index: usize,
    spec: &RoiSpec,
) -> Result<Tensor<T>> {
    check_map::<T>(fmap.shape(), batch_index)?;
    let (c, h, w) = (fmap.dim(1), fmap.dim(2), fmap.dim(3));
    let plan = plan(bbox, spec, h, w)?;
    let p2 = spec.pooled * spec.pooled;
    let mut out = Tensor::zeros(&[c, spec.pooled, spec.pooled]);
    let image = fmap.outer(batch_index);
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for (bin, taps) in plan.taps.iter().enumerate() {
            let v: f64 = taps.iter().map(|&(i, wt)| plane[i].as_f64() * wt).sum();
            out.data_mut()[ch * p2 + bin] = T::from_f64(v);
        }
    }
    Ok(out)
}

/// Adjoint of [`roi_align_forward`]: scatters `[C, P, P]` gradients back onto
/// a zero map of `fmap_shape`.
pub fn roi_align_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    bbox: &BBox,
    batch_index: usize,
    spec: &RoiSpec,
    fmap_shape: &[usize],
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(fmap_shape);
    roi_align_backward_into(grad_out, bbox, batch_index, spec, &mut grad, 1.0)?;
    Ok(grad)
}

/// Accumulating form of [`roi_align_backward`]. `weight_scale` multiplies
/// every interpolation weight; anything other than 1 breaks adjointness and
/// exists only so self-checks can prove they notice.
#[doc(hidden)]
pub fn roi_align_backward_into<T: Scalar>(
    grad_out: &Tensor<T>,
    bbox: &BBox,
    batch_index: usize,
    spec: &RoiSpec,
    grad_fmap: &mut Tensor<T>,
    weight_scale: f64,
) -> Result<()> {
    check_map::<T>(grad_fmap.shape(), batch_index)?;
    let (c, h, w) = (grad_fmap.dim(1), grad_fmap.dim(2), grad_fmap.dim(3));
    grad_out.ensure_shape("roi_align backward", &[c, spec.pooled, spec.pooled])?;
    let plan = plan(bbox, spec, h, w)?;
    let p2 = spec.pooled * spec.pooled;
    let image = grad_fmap.outer_mut(batch_index);
    for ch in 0..c {
        let plane = &mut image[ch * h * w..(ch + 1) * h * w];
        for (bin, taps) in plan.taps.iter().enumerate() {
            let g = grad_out.data()[ch * p2 + bin].as_f64();
            if g == 0.0 {
                continue;
            }
            for &(i, wt) in taps {
                plane[i] += T::from_f64(g * wt * weight_scale);
            }
        }
    }
    Ok(())
}

/// Pools `boxes[i]` from sample `i` of the map, giving `[B, C, P, P]`.
pub fn roi_align_batch<T: Scalar>(fmap: &Tensor<T>, boxes: &[BBox], spec: &RoiSpec) -> Result<Tensor<T>> {
    if fmap.rank() != 4 || boxes.len() != fmap.dim(0) {
        return Err(Error::InvalidArgument(format!(
            "{} boxes for feature map {:?}",
            boxes.len(),
            fmap.shape()
        )));
    }
    let pooled = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| roi_align_forward(fmap, b, i, spec))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&pooled)
}

pub fn roi_align_batch_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    boxes: &[BBox],
    spec: &RoiSpec,
    fmap_shape: &[usize],
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(fmap_shape);
    for (i, b) in boxes.iter().enumerate() {
        let g = Tensor::from_vec(&grad_out.shape()[1..], grad_out.outer(i).to_vec())?;
        roi_align_backward_into(&g, b, i, spec, &mut grad, 1.0)?;
    }
    Ok(grad)
}

/// Pyramid level for a box: `floor(1 + log2(sqrt(area) / 16))`, clamped to
/// `[0, num_levels)`.
pub fn assign_fpn_level(bbox: &BBox, num_levels: usize) -> usize {
    const BASE_LEVEL: f64 = 1.0;
    const CANONICAL_SIZE: f64 = 16.0;
    let level = (BASE_LEVEL + (bbox.area().sqrt() / CANONICAL_SIZE).log2()).floor();
    level.clamp(0.0, (num_levels.max(1) - 1) as f64) as usize
}
