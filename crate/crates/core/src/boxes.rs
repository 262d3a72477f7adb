//! Box geometry, RPN-style anchor grids and anchor-based box augmentation.

use rand::Rng;

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate(format!("box {b:?} has no positive area")));
        }
        Ok(b)
    }

    /// Box covering a whole `h×w` image.
    pub fn full(h: usize, w: usize) -> Self {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: w as f64,
            y2: h as f64,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn is_inside(&self, h: usize, w: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w as f64 && self.y2 <= h as f64
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union, symmetric and in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Clamps a box to `[0, W] × [0, H]`; fails if nothing is left.
pub fn clip_bbox(b: &BBox, image_h: usize, image_w: usize) -> Result<BBox> {
    let (w, h) = (image_w as f64, image_h as f64);
    let clipped = BBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    };
    if !clipped.is_valid() {
        return Err(Error::Degenerate(format!(
            "box {b:?} lies outside the {image_h}x{image_w} image"
        )));
    }
    Ok(clipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    /// Pixels between neighbouring anchor centres, one grid per stride.
    pub strides: Vec<usize>,
    /// Anchor side length `sqrt(w·h)` in pixels.
    pub scales: Vec<f64>,
    /// `w / h`.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            strides: vec![8, 16],
            scales: vec![16.0, 24.0, 32.0, 48.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.strides.is_empty()
            && !self.scales.is_empty()
            && !self.aspect_ratios.is_empty()
            && self.strides.iter().all(|&s| s > 0)
            && self
                .scales
                .iter()
                .chain(&self.aspect_ratios)
                .all(|&v| v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("anchor config {self:?}")))
        }
    }
}

/// Anchors for every cell of every stride grid, one per (scale, ratio).
/// Boxes may extend past the image.
pub fn generate_anchors(cfg: &AnchorConfig, image_h: usize, image_w: usize) -> Vec<BBox> {
    let mut anchors = Vec::new();
    for &stride in &cfg.strides {
        let rows = image_h.div_ceil(stride);
        let cols = image_w.div_ceil(stride);
        for i in 0..rows {
            for j in 0..cols {
                let cy = stride as f64 * (i as f64 + 0.5);
                let cx = stride as f64 * (j as f64 + 0.5);
                for &scale in &cfg.scales {
                    for &ratio in &cfg.aspect_ratios {
                        let r = ratio.sqrt();
                        anchors.push(BBox::from_center(cx, cy, scale * r, scale / r));
                    }
                }
            }
        }
    }
    anchors
}

/// Anchors clipped to the image, ready for augmentation.
pub fn clipped_anchors(cfg: &AnchorConfig, image_h: usize, image_w: usize) -> Vec<BBox> {
    generate_anchors(cfg, image_h, image_w)
        .iter()
        .filter_map(|a| clip_bbox(a, image_h, image_w).ok())
        .collect()
}

/// Every anchor whose IoU with `gt` exceeds `iou_threshold`.
pub fn augment_candidates(gt: &BBox, anchors: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    anchors.iter().filter(|a| iou(a, gt) > iou_threshold).copied().collect()
}

/// Uniformly random anchor overlapping `gt` by more than `iou_threshold`, or
/// `gt` itself when no anchor qualifies.
pub fn augment_bbox<R: Rng>(gt: &BBox, anchors: &[BBox], iou_threshold: f64, rng: &mut R) -> BBox {
    let candidates = augment_candidates(gt, anchors, iou_threshold);
    if candidates.is_empty() {
        *gt
    } else {
        candidates[rng.gen_range(0..candidates.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::iou_by_intervals;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        // half-area sub-box
        assert_eq!(iou(&bx(0.0, 0.0, 4.0, 2.0), &bx(0.0, 0.0, 2.0, 2.0)), 0.5);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let inner = bx(3.0, 4.0, 20.0, 30.0);
        assert_eq!(clip_bbox(&inner, 64, 64).unwrap(), inner);
        assert_eq!(
            clip_bbox(&bx(-5.0, -5.0, 10.0, 10.0), 64, 64).unwrap(),
            bx(0.0, 0.0, 10.0, 10.0)
        );
        assert!(matches!(
            clip_bbox(&bx(70.0, 70.0, 80.0, 80.0), 64, 64),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn single_anchor_is_centered_square() {
        let cfg = AnchorConfig {
            strides: vec![16],
            scales: vec![10.0],
            aspect_ratios: vec![1.0],
        };
        assert_eq!(generate_anchors(&cfg, 16, 16), vec![bx(3.0, 3.0, 13.0, 13.0)]);
    }

    #[test]
    fn anchor_count_and_construction_identities() {
        let cfg = AnchorConfig {
            strides: vec![16],
            scales: vec![16.0, 32.0, 48.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
        };
        let anchors = generate_anchors(&cfg, 64, 64);
        assert_eq!(anchors.len(), 144);
        for (i, a) in anchors.iter().enumerate() {
            let scale = cfg.scales[(i / 3) % 3];
            let ratio = cfg.aspect_ratios[i % 3];
            assert!((a.width() / a.height() - ratio).abs() < 1e-12);
            assert!((a.width() * a.height() - scale * scale).abs() < 1e-9);
        }
        let d = AnchorConfig::default();
        assert_eq!(generate_anchors(&d, 64, 64).len(), (64 + 16) * 12);
    }

    #[test]
    fn augment_with_only_gt_returns_gt() {
        let gt = bx(16.0, 16.0, 48.0, 48.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_bbox(&gt, &[gt], 0.5, &mut rng), gt);
    }

    #[test]
    fn augment_falls_back_when_nothing_overlaps() {
        let gt = bx(0.0, 0.0, 2.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_bbox(&gt, &[bx(30.0, 30.0, 40.0, 40.0)], 0.5, &mut rng), gt);
    }

    #[test]
    fn candidate_count_matches_exhaustive_scan() {
        let gt = bx(16.0, 16.0, 48.0, 48.0);
        let anchors = clipped_anchors(&AnchorConfig::default(), 64, 64);
        let brute = anchors.iter().filter(|a| iou_by_intervals(a, &gt) > 0.5).count();
        assert_eq!(augment_candidates(&gt, &anchors, 0.5).len(), brute);
        assert!(brute > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert!(iou(&augment_bbox(&gt, &anchors, 0.5, &mut rng), &gt) > 0.5);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..60.0f64, 0.0..60.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - iou_by_intervals(&a, &b)).abs() < 1e-12);
        }
    }
}
