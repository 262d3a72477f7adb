//! Anchor-based box augmentation: the query branch pools a random anchor
//! that overlaps the ground-truth box by more than the IoU threshold.

use insloc::boxes::{augment_bbox, augment_candidates, clipped_anchors, generate_anchors, iou, AnchorConfig, BBox};
use insloc::rng::stream;

fn main() -> insloc::Result<()> {
    let cfg = AnchorConfig::default();
    let raw = generate_anchors(&cfg, 64, 64);
    let anchors = clipped_anchors(&cfg, 64, 64);
    println!(
        "{} anchors on a 64x64 composite ({} after clipping)",
        raw.len(),
        anchors.len()
    );

    let gt = BBox::new(10.0, 14.0, 42.0, 38.0)?;
    let candidates = augment_candidates(&gt, &anchors, 0.5);
    println!("ground truth {gt:?} has {} candidates with IoU > 0.5", candidates.len());

    let mut rng = stream(7, "example", 0);
    for _ in 0..5 {
        let b = augment_bbox(&gt, &anchors, 0.5, &mut rng);
        println!(
            "  pooled box {:>5.1} {:>5.1} {:>5.1} {:>5.1}  IoU {:.3}",
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            iou(&b, &gt)
        );
    }

    // A box no anchor matches falls back to itself.
    let thin = BBox::new(0.0, 0.0, 3.0, 60.0)?;
    assert_eq!(augment_bbox(&thin, &anchors, 0.5, &mut rng), thin);
    Ok(())
}
