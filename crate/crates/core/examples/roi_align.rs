//! Pools one box from a small feature map and shows that the backward pass
//! is the exact adjoint of the forward pass.

use insloc::boxes::BBox;
use insloc::roialign::{assign_fpn_level, roi_align_backward, roi_align_forward, RoiSpec};
use insloc::Tensor;

fn main() -> insloc::Result<()> {
    // One image, one channel, a 4x4 ramp.
    let fmap = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let spec = RoiSpec::new(2, 2, 16);
    let bbox = BBox::new(8.0, 8.0, 56.0, 40.0)?;

    let pooled = roi_align_forward(&fmap, &bbox, 0, &spec)?;
    println!("pooled 2x2 grid: {:?}", pooled.data());

    let grad = Tensor::from_vec(&[1, 2, 2], vec![1.0, -0.5, 0.25, 2.0])?;
    let back = roi_align_backward(&grad, &bbox, 0, &spec, fmap.shape())?;
    let lhs = pooled.dot(&grad)?;
    let rhs = fmap.dot(&back)?;
    println!("<F x, g> = {lhs:.12}");
    println!("<x, F^T g> = {rhs:.12}");

    for side in [16.0, 32.0, 64.0, 128.0] {
        let b = BBox::new(0.0, 0.0, side, side)?;
        println!("{side}px box -> pyramid level {}", assign_fpn_level(&b, 4));
    }
    Ok(())
}
