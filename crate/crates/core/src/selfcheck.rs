//! The oracle battery behind `insloc selfcheck`: every kernel compared with
//! an independent slow evaluation, every backward pass with central finite
//! differences.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{augment_candidates, clipped_anchors, iou, AnchorConfig, BBox};
use crate::contrastive::{info_nce_loss, insloc_forward_backward, EncoderPair, MemoryQueue, PairBatch};
use crate::nn::{
    l2_normalize, l2_normalize_backward, relu, relu_backward, standardize_channels, standardize_channels_backward,
    Backbone, BackboneConfig, Conv2d, Linear, MlpHead, Module, Variant,
};
use crate::oracle::{
    dense_roi_align, finite_difference, info_nce_direct, iou_by_intervals, max_rel_error, rel_norm_error,
};
use crate::probes::LinearProbe;
use crate::roialign::{roi_align_backward_into, roi_align_forward, RoiSpec};
use crate::tensor::{Scalar, Tensor};

pub const ROIALIGN_TRIPLES: usize = 100;
pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-3;
pub const TOL_CLOSED_FORM: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Multiplies the bilinear weights of the RoIAlign adjoint. Anything but
    /// 1 is a deliberately broken kernel.
    pub roialign_weight_scale: f64,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            seed: 0,
            roialign_weight_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Observed error magnitude; `NaN` or infinity on failure to evaluate.
    pub error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<24} error {:.3e} (tolerance {:.0e}, {:.2}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance,
            self.seconds
        )
    }
}

/// One random RoIAlign case: map, box (possibly overhanging the image),
/// spec and batch index.
pub struct RoiCase {
    pub fmap: Tensor<f64>,
    pub bbox: BBox,
    pub spec: RoiSpec,
    pub batch_index: usize,
}

pub fn random_roi_case<R: Rng>(rng: &mut R) -> RoiCase {
    let stride = [1usize, 2, 4, 8][rng.gen_range(0..4)];
    let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
    let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
    let fmap = Tensor::from_fn(&[b, c, h, w], |_| rng.gen_range(-1.0..1.0));
    let (img_h, img_w) = ((h * stride) as f64, (w * stride) as f64);
    let x1 = rng.gen_range(-0.2 * img_w..0.8 * img_w);
    let y1 = rng.gen_range(-0.2 * img_h..0.8 * img_h);
    let bw = rng.gen_range(0.1 * img_w..0.8 * img_w);
    let bh = rng.gen_range(0.1 * img_h..0.8 * img_h);
    let spec = RoiSpec {
        pooled: rng.gen_range(1..8),
        samples: rng.gen_range(1..4),
        spatial_scale: 1.0 / stride as f64,
        aligned: rng.gen_bool(0.5),
    };
    RoiCase {
        fmap,
        bbox: BBox::new(x1, y1, x1 + bw, y1 + bh).expect("positive extent"),
        spec,
        batch_index: rng.gen_range(0..b),
    }
}

fn roialign_dense(rng: &mut ChaCha8Rng) -> f64 {
    (0..ROIALIGN_TRIPLES)
        .map(|_| {
            let c = random_roi_case(rng);
            let got = roi_align_forward(&c.fmap, &c.bbox, c.batch_index, &c.spec).expect("valid case");
            let want = dense_roi_align(
                &c.fmap,
                c.batch_index,
                &c.bbox,
                c.spec.pooled,
                c.spec.samples,
                c.spec.spatial_scale,
                c.spec.aligned,
            );
            got.sub(&want).expect("same shape").max_abs()
        })
        .fold(0.0, f64::max)
}

/// Largest `|⟨F x, g⟩ − ⟨x, Fᵀ g⟩| / max(1, |⟨F x, g⟩|)`.
pub fn roialign_adjoint_gap(rng: &mut ChaCha8Rng, weight_scale: f64) -> f64 {
    (0..ROIALIGN_TRIPLES)
        .map(|_| {
            let c = random_roi_case(rng);
            let fx = roi_align_forward(&c.fmap, &c.bbox, c.batch_index, &c.spec).expect("valid case");
            let g = Tensor::from_fn(fx.shape(), |_| rng.gen_range(-1.0..1.0));
            let mut ftg = Tensor::zeros(c.fmap.shape());
            roi_align_backward_into(&g, &c.bbox, c.batch_index, &c.spec, &mut ftg, weight_scale).expect("valid case");
            let lhs = fx.dot(&g).expect("same shape");
            let rhs = c.fmap.dot(&ftg).expect("same shape");
            (lhs - rhs).abs() / lhs.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn roialign_gradient(rng: &mut ChaCha8Rng) -> f64 {
    (0..10)
        .map(|_| {
            let c = random_roi_case(rng);
            let shape = roi_align_forward(&c.fmap, &c.bbox, c.batch_index, &c.spec)
                .unwrap()
                .shape()
                .to_vec();
            let g = random(&shape, rng);
            let mut analytic = Tensor::zeros(c.fmap.shape());
            roi_align_backward_into(&g, &c.bbox, c.batch_index, &c.spec, &mut analytic, 1.0).unwrap();
            let fd = finite_difference(&c.fmap, FD_STEP, |m| {
                roi_align_forward(m, &c.bbox, c.batch_index, &c.spec)
                    .unwrap()
                    .dot(&g)
                    .unwrap()
            });
            max_rel_error(&analytic, &fd)
        })
        .fold(0.0, f64::max)
}

fn conv_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, rng);
    conv.bias.value = random(&[3], rng);
    let x = random(&[2, 2, 6, 6], rng);
    let g = random(&conv.output_shape(x.shape()).unwrap(), rng);
    let gx = conv.backward(&g, &x).unwrap();
    let objective = |c: &Conv2d<f64>, x: &Tensor<f64>| c.forward(x).unwrap().dot(&g).unwrap();
    let fd_x = finite_difference(&x, FD_STEP, |xp| objective(&conv, xp));
    let fd_w = finite_difference(&conv.weight.value, FD_STEP, |w| {
        let mut c = conv.clone();
        c.weight.value = w.clone();
        objective(&c, &x)
    });
    let fd_b = finite_difference(&conv.bias.value, FD_STEP, |b| {
        let mut c = conv.clone();
        c.bias.value = b.clone();
        objective(&c, &x)
    });
    max_rel_error(&gx, &fd_x)
        .max(max_rel_error(&conv.weight.grad, &fd_w))
        .max(max_rel_error(&conv.bias.grad, &fd_b))
}

fn linear_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let mut lin = Linear::<f64>::new(5, 4, rng);
    lin.bias.value = random(&[4], rng);
    let x = random(&[3, 5], rng);
    let g = random(&[3, 4], rng);
    let gx = lin.backward(&g, &x).unwrap();
    let objective = |l: &Linear<f64>, x: &Tensor<f64>| l.forward(x).unwrap().dot(&g).unwrap();
    let fd_x = finite_difference(&x, FD_STEP, |xp| objective(&lin, xp));
    let fd_w = finite_difference(&lin.weight.value, FD_STEP, |w| {
        let mut l = lin.clone();
        l.weight.value = w.clone();
        objective(&l, &x)
    });
    max_rel_error(&gx, &fd_x).max(max_rel_error(&lin.weight.grad, &fd_w))
}

fn relu_gradient(rng: &mut ChaCha8Rng) -> f64 {
    // Keep inputs away from the kink so the central difference is exact.
    let x = Tensor::from_fn(&[4, 6], |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let g = random(&[4, 6], rng);
    let analytic = relu_backward(&g, &relu(&x)).unwrap();
    let fd = finite_difference(&x, FD_STEP, |xp| relu(xp).dot(&g).unwrap());
    max_rel_error(&analytic, &fd)
}

fn l2_normalize_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(&[3, 5], rng);
    let g = random(&[3, 5], rng);
    let analytic = l2_normalize_backward(&g, &x).unwrap();
    let fd = finite_difference(&x, FD_STEP, |xp| l2_normalize(xp).unwrap().dot(&g).unwrap());
    max_rel_error(&analytic, &fd)
}

fn standardize_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(&[2, 3, 4, 4], rng);
    let g = random(&[2, 3, 4, 4], rng);
    let analytic = standardize_channels_backward(&g, &standardize_channels(&x).unwrap()).unwrap();
    let fd = finite_difference(&x, FD_STEP, |xp| {
        standardize_channels(xp).unwrap().output.dot(&g).unwrap()
    });
    max_rel_error(&analytic, &fd)
}

fn mlp_head_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let mut head = MlpHead::<f64>::new(6, 8, 4, rng);
    head.fc1.bias.value = random(&[8], rng);
    let x = random(&[3, 6], rng);
    let g = random(&[3, 4], rng);
    let (_, cache) = head.forward(&x).unwrap();
    let gx = head.backward(&g, &cache).unwrap();
    let objective = |h: &MlpHead<f64>, x: &Tensor<f64>| h.forward(x).unwrap().0.dot(&g).unwrap();
    let mut err = max_rel_error(&gx, &finite_difference(&x, FD_STEP, |xp| objective(&head, xp)));
    let grads: Vec<Tensor<f64>> = head.params().iter().map(|(_, p)| p.grad.clone()).collect();
    for (i, analytic) in grads.iter().enumerate() {
        let fd = finite_difference(&head.params()[i].1.value, FD_STEP, |v| {
            let mut h = head.clone();
            h.params_mut()[i].1.value = v.clone();
            objective(&h, &x)
        });
        err = err.max(max_rel_error(analytic, &fd));
    }
    err
}

fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    l2_normalize(&random(&[b, d], rng)).unwrap()
}

fn info_nce_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let q = unit_rows(3, 6, rng);
    let k = unit_rows(3, 6, rng);
    let mut queue = MemoryQueue::empty(10, 6).unwrap();
    queue.enqueue(&unit_rows(7, 6, rng)).unwrap();
    let out = info_nce_loss(&q, &k, &queue, 0.2).unwrap();
    // The loss is defined on the unit sphere; differentiate the formula
    // directly in the ambient space.
    let negatives: Vec<Vec<f64>> = (0..queue.filled()).map(|i| queue.row(i).to_vec()).collect();
    let fd = finite_difference(&q, FD_STEP, |qp| {
        (0..3)
            .map(|i| info_nce_direct(qp.outer(i), k.outer(i), &negatives, 0.2))
            .sum::<f64>()
            / 3.0
    });
    max_rel_error(&out.grad_q, &fd)
}

fn probe_loss_gradient(rng: &mut ChaCha8Rng) -> f64 {
    let x = random(&[12, 4], rng);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let mut probe = LinearProbe::zeros(4, 3);
    probe.weight = random(&[4, 3], rng);
    probe.bias = random(&[3], rng);
    let (_, gw, gb) = probe.loss_and_grad(&x, &labels).unwrap();
    let fd_w = finite_difference(&probe.weight, FD_STEP, |w| {
        let p = LinearProbe {
            weight: w.clone(),
            bias: probe.bias.clone(),
        };
        p.loss_and_grad(&x, &labels).unwrap().0
    });
    let fd_b = finite_difference(&probe.bias, FD_STEP, |b| {
        let p = LinearProbe {
            weight: probe.weight.clone(),
            bias: b.clone(),
        };
        p.loss_and_grad(&x, &labels).unwrap().0
    });
    max_rel_error(&gw, &fd_w).max(max_rel_error(&gb, &fd_b))
}

/// `−log(e⁵ / (e⁵ + 8))` against the kernel for `q = k₊` and eight
/// orthogonal negatives at `τ = 0.2`.
pub fn info_nce_closed_form_gap() -> f64 {
    let d = 9;
    let basis = |i: usize| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let q = Tensor::from_vec(&[1, d], basis(0)).unwrap();
    let mut queue = MemoryQueue::empty(8, d).unwrap();
    let negatives: Vec<f64> = (1..=8).flat_map(basis).collect();
    queue.enqueue(&Tensor::from_vec(&[8, d], negatives).unwrap()).unwrap();
    let loss = info_nce_loss(&q, &q, &queue, 0.2).unwrap().loss;
    let e5 = 5f64.exp();
    (loss - (-(e5 / (e5 + 8.0)).ln())).abs()
}

/// Tiny architectures for the end-to-end checks, wide enough that no
/// embedding starts out dead.
pub fn tiny_backbone_config(variant: Variant) -> BackboneConfig {
    match variant {
        Variant::C4 => BackboneConfig {
            variant,
            widths: vec![6, 8],
            head_width: 8,
            fpn_width: 4,
            mlp_hidden: 6,
            embed_dim: 5,
            roi_size: 2,
            ..BackboneConfig::default()
        },
        Variant::Fpn => BackboneConfig {
            variant,
            widths: vec![4, 4, 4, 4],
            fpn_width: 3,
            head_width: 6,
            mlp_hidden: 8,
            embed_dim: 5,
            roi_size: 2,
            ..BackboneConfig::default()
        },
    }
}

/// Random images, random half-size boxes.
pub fn tiny_batch<T: Scalar>(rng: &mut ChaCha8Rng, b: usize, size: usize) -> PairBatch<T> {
    let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[b, 3, size, size], |_| T::from_f64(rng.gen_range(-1.0..1.0)));
    let half = size as f64 / 2.0;
    let boxes = |rng: &mut ChaCha8Rng| {
        (0..b)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..half), rng.gen_range(0.0..half));
                BBox::new(x, y, x + half, y + half).unwrap()
            })
            .collect::<Vec<_>>()
    };
    PairBatch {
        query_images: img(rng),
        query_boxes: boxes(rng),
        key_images: img(rng),
        key_boxes: boxes(rng),
    }
}

/// Relative gradient error of the full query-branch loss, over every
/// parameter tensor of the query encoder. The analytic pass runs in `T`;
/// the finite-difference reference always runs in 64-bit.
pub fn end_to_end_gradient_error<T: Scalar>(variant: Variant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = if variant == Variant::C4 { 16 } else { 64 };
    let pair = EncoderPair::new(
        Backbone::<f64>::new(tiny_backbone_config(variant), &mut rng).unwrap(),
        0.99,
    );
    let batch = tiny_batch::<f64>(&mut rng, 2, size);
    let levels = pair.query.config.feature_strides().len();
    let queues: Vec<MemoryQueue<f64>> = (0..levels)
        .map(|_| MemoryQueue::random(6, 5, &mut rng).unwrap())
        .collect();

    let mut analytic = pair.cast::<T>();
    let batch_t = PairBatch {
        query_images: batch.query_images.cast(),
        query_boxes: batch.query_boxes.clone(),
        key_images: batch.key_images.cast(),
        key_boxes: batch.key_boxes.clone(),
    };
    let queues_t: Vec<MemoryQueue<T>> = queues
        .iter()
        .map(|q| {
            MemoryQueue::from_parts(
                q.capacity(),
                q.dim(),
                q.storage().iter().map(|&v| T::from_f64(v)).collect(),
                q.cursor(),
                q.filled(),
            )
            .unwrap()
        })
        .collect();
    analytic.query.zero_grad();
    insloc_forward_backward(
        &mut analytic.query,
        &analytic.key,
        &batch_t,
        &batch_t.query_boxes,
        &queues_t,
        0.2,
    )
    .unwrap();
    let grads: Vec<Tensor<f64>> = analytic.query.params().iter().map(|(_, p)| p.grad.cast()).collect();

    let loss_of = |p: &EncoderPair<f64>| {
        let mut q = p.query.clone();
        insloc_forward_backward(&mut q, &p.key, &batch, &batch.query_boxes, &queues, 0.2)
            .unwrap()
            .0
    };
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let fd = finite_difference(&pair.query.params()[i].1.value, FD_STEP, |x| {
            let mut probe = pair.clone();
            probe.query.params_mut()[i].1.value = x.clone();
            loss_of(&probe)
        });
        worst = worst.max(rel_norm_error(g, &fd));
    }
    worst
}

/// Exhaustive anchor scan: for random ground truths, the augmentation
/// candidate set equals a brute-force filter using the interval-based IoU,
/// and the kernel IoU agrees with the oracle on every anchor.
fn anchor_iou_scan(rng: &mut ChaCha8Rng) -> f64 {
    let anchors = clipped_anchors(&AnchorConfig::default(), 64, 64);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(8.0..64.0), rng.gen_range(8.0..64.0));
        let (x, y) = (rng.gen_range(0.0..64.0 - w), rng.gen_range(0.0..64.0 - h));
        let gt = BBox::new(x, y, x + w, y + h).unwrap();
        let mut mismatches = 0.0;
        let got = augment_candidates(&gt, &anchors, 0.5);
        let want: Vec<BBox> = anchors
            .iter()
            .filter(|a| iou_by_intervals(a, &gt) > 0.5)
            .copied()
            .collect();
        if got != want {
            mismatches += 1.0;
        }
        for a in &anchors {
            worst = worst.max((iou(a, &gt) - iou_by_intervals(a, &gt)).abs());
            worst = worst.max((iou(a, &gt) - iou(&gt, a)).abs());
        }
        worst = worst.max(mismatches);
    }
    worst
}

fn timed(name: &'static str, tolerance: f64, f: impl FnOnce() -> f64) -> Check {
    let start = Instant::now();
    let error = f();
    Check {
        name,
        error: if error.is_nan() { f64::INFINITY } else { error },
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check, each from its own seeded generator.
pub fn run_selfcheck(options: &SelfcheckOptions) -> Vec<Check> {
    let rng = |salt: u64| ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(1000).wrapping_add(salt));
    vec![
        timed("roialign-dense-oracle", TOL_F64, || roialign_dense(&mut rng(1))),
        timed("roialign-adjointness", TOL_F64, || {
            roialign_adjoint_gap(&mut rng(2), options.roialign_weight_scale)
        }),
        timed("roialign-gradient", TOL_F64, || roialign_gradient(&mut rng(3))),
        timed("conv-gradient", TOL_F64, || conv_gradient(&mut rng(4))),
        timed("linear-gradient", TOL_F64, || linear_gradient(&mut rng(5))),
        timed("relu-gradient", TOL_F64, || relu_gradient(&mut rng(6))),
        timed("l2-normalize-gradient", TOL_F64, || l2_normalize_gradient(&mut rng(7))),
        timed("standardize-gradient", TOL_F64, || standardize_gradient(&mut rng(8))),
        timed("mlp-head-gradient", TOL_F64, || mlp_head_gradient(&mut rng(9))),
        timed("info-nce-gradient", TOL_F64, || info_nce_gradient(&mut rng(10))),
        timed("probe-loss-gradient", TOL_F64, || probe_loss_gradient(&mut rng(11))),
        timed("info-nce-closed-form", TOL_CLOSED_FORM, info_nce_closed_form_gap),
        timed("end-to-end-c4-f64", TOL_F64, || {
            end_to_end_gradient_error::<f64>(Variant::C4, options.seed + 12)
        }),
        timed("end-to-end-fpn-f64", TOL_F64, || {
            end_to_end_gradient_error::<f64>(Variant::Fpn, options.seed + 13)
        }),
        timed("end-to-end-c4-f32", TOL_F32, || {
            end_to_end_gradient_error::<f32>(Variant::C4, options.seed + 14)
        }),
        timed("anchor-iou-scan", 1e-12, || anchor_iou_scan(&mut rng(15))),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_kernels_pass_every_check() {
        for c in run_selfcheck(&SelfcheckOptions::default()) {
            assert!(c.passed(), "{}", c.line());
        }
    }

    #[test]
    fn perturbed_adjoint_is_caught() {
        let opts = SelfcheckOptions {
            roialign_weight_scale: 1.01,
            ..SelfcheckOptions::default()
        };
        let failed: Vec<_> = run_selfcheck(&opts)
            .into_iter()
            .filter(|c| !c.passed())
            .map(|c| c.name)
            .collect();
        assert_eq!(failed, vec!["roialign-adjointness"]);
    }
}
