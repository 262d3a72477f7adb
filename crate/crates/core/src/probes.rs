//! Frozen-encoder linear readouts: which of `M` grid cells a pooled patch
//! came from (localization) and which gallery instance a view shows
//! (classification).

use nalgebra::{Cholesky, DMatrix};
use rand::seq::SliceRandom;

use crate::boxes::BBox;
use crate::contrastive::level_specs;
use crate::error::{Error, Result};
use crate::imaging::{
    augment_view, generate_gallery, images_to_tensor, resample_region, resize_bilinear, AugmentParams, Image,
};
use crate::nn::{Backbone, Variant, FPN_LEVELS};
use crate::rng::stream;
use crate::roialign::{assign_fpn_level, roi_align_forward, RoiSpec};
use crate::tensor::{gemm, Scalar, Tensor, Trans};
use crate::trainer::TrainConfig;

/// Ridge added to the standardized covariance before whitening.
pub const WHITEN_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Patch count, a perfect square.
    pub m: usize,
    pub steps: usize,
    /// Step size in units of the inverse curvature bound of the standardized
    /// features; values up to 2 are stable.
    pub lr: f64,
    /// Fraction of images held out for localization.
    pub eval_fraction: f64,
    pub train_views: usize,
    pub eval_views: usize,
    pub seed: u64,
    /// Forward each patch alone (resampled to the input size) instead of
    /// pooling it from the full-image features.
    pub isolated_patches: bool,
    /// Decorrelate the standardized features before fitting.
    pub whiten: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            m: 9,
            steps: 500,
            lr: 1.0,
            eval_fraction: 0.2,
            train_views: 4,
            eval_views: 8,
            seed: 0,
            isolated_patches: false,
            whiten: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if self.m == 0 || self.m.isqrt().pow(2) != self.m {
            return bad("probe_m", format!("{} is not a positive perfect square", self.m));
        }
        if self.steps == 0 {
            return bad("probe_steps", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("probe_lr", format!("{} must be positive", self.lr));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("probe_eval_fraction", format!("{} outside (0, 1)", self.eval_fraction));
        }
        if self.train_views == 0 || self.eval_views == 0 {
            return bad("probe_train_views", "view counts must be positive".into());
        }
        Ok(())
    }
}

/// The `√M × √M` grid of cells over an `h × w` image, row-major.
pub fn patch_grid(h: usize, w: usize, m: usize) -> Result<Vec<BBox>> {
    let side = m.isqrt();
    if m == 0 || side * side != m {
        return Err(Error::InvalidArgument(format!(
            "patch count {m} is not a perfect square"
        )));
    }
    let edge = |i: usize, len: usize| (i * len) as f64 / side as f64;
    let mut out = Vec::with_capacity(m);
    for r in 0..side {
        for c in 0..side {
            out.push(BBox::new(edge(c, w), edge(r, h), edge(c + 1, w), edge(r + 1, h))?);
        }
    }
    Ok(out)
}

/// Head outputs (not normalized) for every `(image, box)` pair, images
/// forwarded in chunks. FPN boxes are pooled at their assigned level.
pub fn head_outputs<T: Scalar>(encoder: &Backbone<T>, images: &[&Image], boxes: &[Vec<BBox>]) -> Result<Tensor<T>> {
    const CHUNK: usize = 16;
    if images.len() != boxes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} box lists",
            images.len(),
            boxes.len()
        )));
    }
    let specs: Vec<RoiSpec> = level_specs(encoder);
    let mut rows = Vec::new();
    let mut dim = encoder.config.embed_dim;
    for (imgs, bxs) in images.chunks(CHUNK).zip(boxes.chunks(CHUNK)) {
        let (maps, _) = encoder.features(&images_to_tensor(imgs)?)?;
        let mut pooled = Vec::new();
        for (i, list) in bxs.iter().enumerate() {
            for b in list {
                let level = match encoder.config.variant {
                    Variant::C4 => 0,
                    Variant::Fpn => assign_fpn_level(b, FPN_LEVELS),
                };
                pooled.push(roi_align_forward(&maps[level], b, i, &specs[level])?);
            }
        }
        if pooled.is_empty() {
            continue;
        }
        let (out, _) = encoder.head.forward(&Tensor::stack(&pooled)?)?;
        dim = out.dim(1);
        rows.extend_from_slice(out.data());
    }
    Tensor::from_vec(&[rows.len() / dim, dim], rows)
}

fn check_input_size<T: Scalar>(encoder: &Backbone<T>, img: &Image) -> Result<()> {
    let s = encoder.config.total_stride();
    if img.height() % s != 0 || img.width() % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "probe image {}x{} is not a multiple of the network stride {s}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Embedding of one grid cell of `image`.
pub fn extract_patch_embedding<T: Scalar>(
    encoder: &Backbone<T>,
    image: &Image,
    patch_index: usize,
    m: usize,
    isolated: bool,
) -> Result<Tensor<T>> {
    let grid = patch_grid(image.height(), image.width(), m)?;
    let cell = *grid
        .get(patch_index)
        .ok_or_else(|| Error::InvalidArgument(format!("patch index {patch_index} out of range for M = {m}")))?;
    check_input_size(encoder, image)?;
    let out = if isolated {
        let crop = isolate(image, &cell);
        head_outputs(encoder, &[&crop], &[vec![BBox::full(image.height(), image.width())]])?
    } else {
        head_outputs(encoder, &[image], &[vec![cell]])?
    };
    Tensor::from_vec(&[out.dim(1)], out.into_vec())
}

/// Patch resampled to the full input size.
fn isolate(image: &Image, cell: &BBox) -> Image {
    resample_region(
        image,
        cell.x1,
        cell.y1,
        cell.width(),
        cell.height(),
        image.height(),
        image.width(),
    )
}

/// Embeddings of all `M` cells of every image, image-major, with cell
/// labels.
pub fn patch_embeddings<T: Scalar>(
    encoder: &Backbone<T>,
    images: &[&Image],
    m: usize,
    isolated: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut labels = Vec::with_capacity(images.len() * m);
    for img in images {
        check_input_size(encoder, img)?;
        labels.extend(0..m);
    }
    let out = if isolated {
        let mut crops = Vec::with_capacity(images.len() * m);
        for img in images {
            for cell in patch_grid(img.height(), img.width(), m)? {
                crops.push(isolate(img, &cell));
            }
        }
        let refs: Vec<&Image> = crops.iter().collect();
        let boxes: Vec<Vec<BBox>> = crops.iter().map(|c| vec![BBox::full(c.height(), c.width())]).collect();
        head_outputs(encoder, &refs, &boxes)?
    } else {
        let boxes = images
            .iter()
            .map(|img| patch_grid(img.height(), img.width(), m))
            .collect::<Result<Vec<_>>>()?;
        head_outputs(encoder, images, &boxes)?
    };
    Ok((out, labels))
}

/// Per-dimension affine map to zero mean, unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    /// Statistics of `x` (`[n, D]`). Constant dimensions map to zero.
    pub fn fit<T: Scalar>(x: &Tensor<T>) -> Self {
        let (n, d) = (x.dim(0), x.dim(1));
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        let inv_std = var
            .iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<f64> {
        let d = self.mean.len();
        Tensor::from_fn(x.shape(), |i| {
            let j = i % d;
            (x.data()[i].as_f64() - self.mean[j]) * self.inv_std[j]
        })
    }
}

/// Decorrelating map applied after standardization: `z ↦ L⁻¹ z` with
/// `L Lᵀ = cov(z) + ridge·I`. Makes the probe's loss well conditioned so a
/// fixed step budget reaches the same fit for every encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    standardizer: Standardizer,
    /// Lower-triangular Cholesky factor, row-major `[D, D]`.
    factor: Vec<f64>,
}

impl Whitener {
    pub fn fit<T: Scalar>(x: &Tensor<T>, ridge: f64) -> Result<Self> {
        let standardizer = Standardizer::fit(x);
        let z = standardizer.apply(x);
        let (n, d) = (z.dim(0), z.dim(1));
        let zm = DMatrix::from_row_slice(n, d, z.data());
        let cov = zm.transpose() * &zm / n.max(1) as f64 + DMatrix::identity(d, d) * ridge;
        let chol = Cholesky::new(cov)
            .ok_or_else(|| Error::Degenerate("probe feature covariance is not positive definite".into()))?;
        let l = chol.l();
        let factor = (0..d * d).map(|i| l[(i / d, i % d)]).collect();
        Ok(Whitener { standardizer, factor })
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<f64> {
        let z = self.standardizer.apply(x);
        let d = z.dim(1);
        let l = DMatrix::from_row_slice(d, d, &self.factor);
        let zt = DMatrix::from_row_slice(z.dim(0), d, z.data()).transpose();
        let w = l
            .solve_lower_triangular(&zt)
            .expect("Cholesky factor has a positive diagonal");
        Tensor::from_fn(z.shape(), |i| w[(i % d, i / d)])
    }
}

/// Multinomial logistic regression `softmax(x·W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[D, L]`.
    pub weight: Tensor<f64>,
    /// `[L]`.
    pub bias: Tensor<f64>,
}

impl LinearProbe {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearProbe {
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (n, d, l) = (x.dim(0), self.weight.dim(0), self.classes());
        if x.rank() != 2 || x.dim(1) != d {
            return Err(Error::shape("probe logits", x.shape(), self.weight.shape()));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.data().iter().copied()).collect();
        gemm(
            Trans::No,
            Trans::No,
            n,
            d,
            l,
            1.0,
            x.data(),
            self.weight.data(),
            1.0,
            &mut out,
        );
        Tensor::from_vec(&[n, l], out)
    }

    /// Mean softmax cross-entropy and its gradients `(loss, dW, db)`.
    pub fn loss_and_grad(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Tensor<f64>, Tensor<f64>)> {
        let logits = self.logits(x)?;
        let (n, l, d) = (x.dim(0), self.classes(), self.weight.dim(0));
        if labels.len() != n || labels.iter().any(|&y| y >= l) {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {n} rows and {l} classes",
                labels.len()
            )));
        }
        let mut delta = logits.into_vec();
        let mut loss = 0.0;
        for (row, &y) in delta.chunks_mut(l).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() + max - row[y];
            for v in row.iter_mut() {
                *v = (*v - max).exp() / z / n as f64;
            }
            row[y] -= 1.0 / n as f64;
        }
        let mut gw = vec![0.0; d * l];
        gemm(Trans::Yes, Trans::No, d, n, l, 1.0, x.data(), &delta, 0.0, &mut gw);
        let mut gb = vec![0.0; l];
        for row in delta.chunks(l) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        Ok((
            loss / n as f64,
            Tensor::from_vec(&[d, l], gw)?,
            Tensor::from_vec(&[l], gb)?,
        ))
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .data()
            .chunks(self.classes())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Largest eigenvalue of `[x 1]ᵀ[x 1] / n` by power iteration.
fn curvature_bound(x: &Tensor<f64>) -> f64 {
    let (n, d) = (x.dim(0), x.dim(1));
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut av = vec![0.0; d + 1];
        for row in x.data().chunks(d) {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
            for (o, a) in av.iter_mut().zip(row) {
                *o += a * dot;
            }
            av[d] += dot;
        }
        let norm = av.iter().map(|a| a * a).sum::<f64>().sqrt() / n as f64;
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = av.iter().map(|a| a / (norm * n as f64)).collect();
    }
    lambda
}

/// Full-batch gradient descent on softmax cross-entropy from a zero
/// classifier. The step is `lr / max(1, λ)`, with `λ` the curvature bound of
/// the inputs.
pub fn train_linear_probe(
    x: &Tensor<f64>,
    labels: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
) -> Result<LinearProbe> {
    let n = x.dim(0);
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {n} rows", labels.len())));
    }
    let mut seen = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Degenerate(format!(
            "probe labels span {} class(es), need at least 2",
            seen.len()
        )));
    }
    if n < classes {
        return Err(Error::InvalidArgument(format!("{n} probe rows for {classes} classes")));
    }
    let step = lr / curvature_bound(x).max(1.0);
    let mut probe = LinearProbe::zeros(x.dim(1), classes);
    for _ in 0..steps {
        let (_, gw, gb) = probe.loss_and_grad(x, labels)?;
        probe.weight.axpy(-step, &gw)?;
        probe.bias.axpy(-step, &gb)?;
    }
    Ok(probe)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub chance: f64,
    pub eval_samples: usize,
}

/// Standardizes with train statistics, fits, and scores both splits.
fn fit_and_score<T: Scalar>(
    train: (&Tensor<T>, &[usize]),
    eval: (&Tensor<T>, &[usize]),
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let (xt, xe) = if config.whiten {
        let w = Whitener::fit(train.0, WHITEN_RIDGE)?;
        (w.apply(train.0), w.apply(eval.0))
    } else {
        let st = Standardizer::fit(train.0);
        (st.apply(train.0), st.apply(eval.0))
    };
    let probe = train_linear_probe(&xt, train.1, classes, config.steps, config.lr)?;
    Ok(ProbeResult {
        train_accuracy: probe.accuracy(&xt, train.1)?,
        eval_accuracy: probe.accuracy(&xe, eval.1)?,
        chance: 1.0 / classes as f64,
        eval_samples: eval.1.len(),
    })
}

/// Images resized to `size × size` when needed.
pub fn probe_images(images: &[Image], size: usize) -> Vec<Image> {
    images
        .iter()
        .map(|img| {
            if img.height() == size && img.width() == size {
                img.clone()
            } else {
                resize_bilinear(img, size, size)
            }
        })
        .collect()
}

/// Localization probe: train on the cells of a random `1 − eval_fraction`
/// of the images, score on the cells of the rest.
pub fn localization_probe_accuracy<T: Scalar>(
    encoder: &Backbone<T>,
    images: &[Image],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    config.validate()?;
    if config.m == 1 {
        return Ok(ProbeResult {
            train_accuracy: 1.0,
            eval_accuracy: 1.0,
            chance: 1.0,
            eval_samples: 0,
        });
    }
    let n = images.len();
    let n_eval = ((n as f64 * config.eval_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::InvalidArgument(
            "localization probe needs at least 2 images".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(config.seed, "probe-split", 0));
    let (eval_ids, train_ids) = order.split_at(n_eval);
    let pick = |ids: &[usize]| ids.iter().map(|&i| &images[i]).collect::<Vec<_>>();
    let (xt, yt) = patch_embeddings(encoder, &pick(train_ids), config.m, config.isolated_patches)?;
    let (xe, ye) = patch_embeddings(encoder, &pick(eval_ids), config.m, config.isolated_patches)?;
    fit_and_score((&xt, &yt), (&xe, &ye), config.m, config)
}

/// Full-box embeddings of `views` augmented views per instance, with
/// instance labels.
pub fn view_embeddings<T: Scalar>(
    encoder: &Backbone<T>,
    images: &[Image],
    augment: &AugmentParams,
    views: usize,
    seed: u64,
    stream_name: &str,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let mut all = Vec::with_capacity(images.len() * views);
    let mut labels = Vec::with_capacity(images.len() * views);
    for (k, img) in images.iter().enumerate() {
        let mut rng = stream(seed, stream_name, k as u64);
        for _ in 0..views {
            all.push(augment_view(img, augment, &mut rng));
            labels.push(k);
        }
    }
    let refs: Vec<&Image> = all.iter().collect();
    let boxes: Vec<Vec<BBox>> = all.iter().map(|v| vec![BBox::full(v.height(), v.width())]).collect();
    Ok((head_outputs(encoder, &refs, &boxes)?, labels))
}

/// Classification probe over instance labels: train on `train_views`
/// augmented views per instance, score on `eval_views` fresh ones.
pub fn classification_probe_accuracy<T: Scalar>(
    encoder: &Backbone<T>,
    images: &[Image],
    augment: &AugmentParams,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    config.validate()?;
    let (xt, yt) = view_embeddings(
        encoder,
        images,
        augment,
        config.train_views,
        config.seed,
        "probe-train-view",
    )?;
    let (xe, ye) = view_embeddings(
        encoder,
        images,
        augment,
        config.eval_views,
        config.seed,
        "probe-eval-view",
    )?;
    fit_and_score((&xt, &yt), (&xe, &ye), images.len(), config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub localization: ProbeResult,
    pub classification: ProbeResult,
}

/// Both probes over the run's gallery, resized to the composite size, with
/// the run's view augmentation for classification.
pub fn evaluate_encoder<T: Scalar>(
    encoder: &Backbone<T>,
    train: &TrainConfig,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let gallery = generate_gallery(train.gallery_size, train.image_size, train.seed)?;
    let images = probe_images(&gallery.images, train.composite_size);
    Ok(ProbeReport {
        localization: localization_probe_accuracy(encoder, &images, config)?,
        classification: classification_probe_accuracy(encoder, &images, &train.augment_params(), config)?,
    })
}

/// Probe TSV row: `mode<TAB>M<TAB>loc_acc<TAB>cls_acc<TAB>seed`.
pub fn probe_tsv_row(mode: &str, m: usize, loc: f64, cls: f64, seed: u64) -> String {
    format!("{mode}\t{m}\t{loc:.6}\t{cls:.6}\t{seed}")
}
