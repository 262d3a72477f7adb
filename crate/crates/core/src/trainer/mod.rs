//! SGD with momentum, the cosine schedule and the pretraining loop.
//!
//! Every random draw of step `t` comes from streams indexed by `t` (and the
//! sample index), never from state carried across steps. A checkpoint
//! therefore only needs parameters, optimizer velocity and queues to resume
//! bit-exactly.

mod checkpoint;

pub use checkpoint::{config_hash, Blob, BlobData, Checkpoint, MAGIC, VERSION};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;

use crate::boxes::{clipped_anchors, AnchorConfig, BBox};
use crate::composition::{make_pair, CompositionParams};
use crate::config::{augment_for, backbone_for, parse_train, render_train, variant_for};
use crate::contrastive::{insloc_step_loss, BoxAugmentation, EncoderPair, MemoryQueue, PairBatch};
use crate::error::{Error, Result};
use crate::imaging::{augment_view, generate_gallery, images_to_tensor, AugmentParams, Gallery, Image};
use crate::nn::{Backbone, BackboneConfig, Module, Variant};
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    InslocC4,
    InslocFpn,
    /// Two augmented views of the whole image, pooled at the full-image box
    /// through the same C4 network.
    BaselineHolistic,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::InslocC4 => "insloc-c4",
            TrainMode::InslocFpn => "insloc-fpn",
            TrainMode::BaselineHolistic => "baseline-holistic",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "insloc-c4" => Ok(TrainMode::InslocC4),
            "insloc-fpn" => Ok(TrainMode::InslocFpn),
            "baseline-holistic" => Ok(TrainMode::BaselineHolistic),
            _ => Err(format!(
                "unknown mode `{s}`, expected insloc-c4, insloc-fpn or baseline-holistic"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueInit {
    Random,
    Grow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub queue_size: usize,
    pub queue_init: QueueInit,
    pub ema_momentum: f64,
    pub seed: u64,
    pub gallery_size: usize,
    pub image_size: usize,
    pub composite_size: usize,
    pub fg_scale: (f64, f64),
    /// `None` picks the architecture's default range.
    pub aspect_min: Option<f64>,
    pub aspect_max: Option<f64>,
    pub box_aug: bool,
    pub box_aug_iou: f64,
    pub anchors: AnchorConfig,
    /// `view_size` is ignored; views always match `composite_size`.
    pub augment: AugmentParams,
    /// `variant` is ignored; it follows `mode`.
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::InslocC4,
            steps: 2000,
            batch_size: 32,
            lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            tau: 0.2,
            queue_size: 1024,
            queue_init: QueueInit::Random,
            ema_momentum: 0.999,
            seed: 0,
            gallery_size: 256,
            image_size: 64,
            composite_size: 64,
            fg_scale: (16.0, 48.0),
            aspect_min: None,
            aspect_max: None,
            box_aug: true,
            box_aug_iou: 0.5,
            anchors: AnchorConfig::default(),
            augment: AugmentParams::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        variant_for(self.mode)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        backbone_for(self)
    }

    pub fn augment_params(&self) -> AugmentParams {
        augment_for(self)
    }

    pub fn composition_params(&self) -> CompositionParams {
        let base = CompositionParams::for_variant(self.variant());
        CompositionParams {
            composite_size: self.composite_size,
            scale: self.fg_scale,
            aspect: (
                self.aspect_min.unwrap_or(base.aspect.0),
                self.aspect_max.unwrap_or(base.aspect.1),
            ),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lr", self.lr), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(k, format!("{v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(config_err("sgd_momentum", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(config_err("ema_momentum", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.box_aug_iou) {
            return Err(config_err("box_aug_iou", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(config_err("weight_decay", "must be non-negative"));
        }
        let min_gallery = if self.mode == TrainMode::BaselineHolistic { 2 } else { 3 };
        if self.gallery_size < min_gallery {
            return Err(config_err(
                "gallery_size",
                format!("mode {} needs at least {min_gallery} instances", self.mode),
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.gallery_size {
            return Err(config_err(
                "batch_size",
                format!(
                    "{} must lie in [1, gallery_size = {}]",
                    self.batch_size, self.gallery_size
                ),
            ));
        }
        if self.batch_size > self.queue_size {
            return Err(config_err(
                "queue_size",
                format!("{} is smaller than batch_size {}", self.queue_size, self.batch_size),
            ));
        }
        let backbone = self.backbone_config();
        backbone.validate().map_err(|e| config_err("widths", e.to_string()))?;
        let stride = backbone.total_stride();
        if self.composite_size % stride != 0 {
            return Err(config_err(
                "composite_size",
                format!(
                    "{} is not a multiple of the network stride {stride}",
                    self.composite_size
                ),
            ));
        }
        let (lo, hi) = self.fg_scale;
        if lo > hi || hi > self.composite_size as f64 || lo.ceil() > hi.floor() {
            return Err(config_err(
                "fg_scale_max",
                format!(
                    "scale range [{lo}, {hi}] must hold an integer and fit composite_size {}",
                    self.composite_size
                ),
            ));
        }
        let comp = self.composition_params();
        if comp.aspect.0 > comp.aspect.1 {
            return Err(config_err(
                "aspect_max",
                format!("aspect range {:?} is empty", comp.aspect),
            ));
        }
        if self.augment.crop_area.0 > self.augment.crop_area.1 {
            return Err(config_err("crop_area_max", "crop area range is empty"));
        }
        self.augment_params()
            .validate()
            .map_err(|e| config_err("crop_area_min", e.to_string()))?;
        self.anchors
            .validate()
            .map_err(|e| config_err("anchor_scales", e.to_string()))?;
        Ok(())
    }

    pub fn render(&self) -> String {
        render_train(self)
    }

    pub fn hash(&self) -> u64 {
        config_hash(&self.render())
    }
}

/// `0.5 · base_lr · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One SGD-with-momentum update of a single tensor:
/// `g ← grad + wd·θ; v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    param.ensure_same_shape("sgd_step grad", grad)?;
    param.ensure_same_shape("sgd_step velocity", velocity)?;
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Mean cosine similarity between queries and their positive keys.
    pub positive_similarity: f64,
}

impl StepRecord {
    /// Metrics TSV line: `step<TAB>loss<TAB>lr`.
    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.loss, self.lr)
    }
}

/// Worker threads for batch preparation: `INSLOC_THREADS` if set, else the
/// available parallelism.
pub fn data_threads() -> usize {
    std::env::var("INSLOC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Complete mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub gallery: Gallery,
    pub pair: EncoderPair<f32>,
    pub queues: Vec<MemoryQueue<f32>>,
    pub velocity: Vec<Tensor<f32>>,
    /// Number of completed steps.
    pub step: usize,
    composition: CompositionParams,
    augment: AugmentParams,
    box_aug: BoxAugmentation,
    threads: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let gallery = generate_gallery(config.gallery_size, config.image_size, config.seed)?;
        let backbone = Backbone::new(config.backbone_config(), &mut stream(config.seed, "init", 0))?;
        let levels = backbone.config.feature_strides().len();
        let dim = backbone.config.embed_dim;
        let queues = (0..levels)
            .map(|l| match config.queue_init {
                QueueInit::Random => {
                    MemoryQueue::random(config.queue_size, dim, &mut stream(config.seed, "queue", l as u64))
                }
                QueueInit::Grow => MemoryQueue::empty(config.queue_size, dim),
            })
            .collect::<Result<Vec<_>>>()?;
        let velocity = backbone
            .params()
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let box_aug = BoxAugmentation {
            enabled: config.box_aug && config.mode != TrainMode::BaselineHolistic,
            anchors: clipped_anchors(&config.anchors, config.composite_size, config.composite_size),
            iou_threshold: config.box_aug_iou,
        };
        Ok(Trainer {
            composition: config.composition_params(),
            augment: config.augment_params(),
            box_aug,
            pair: EncoderPair::new(backbone, config.ema_momentum),
            config,
            gallery,
            queues,
            velocity,
            step: 0,
            threads: data_threads(),
        })
    }

    /// Overrides the batch-preparation thread count; results do not depend
    /// on it.
    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    /// Query/key samples of one step, identical for any thread count.
    pub fn build_batch(&self, step: usize) -> Result<(PairBatch<f32>, Vec<usize>)> {
        let cfg = &self.config;
        let b = cfg.batch_size;
        let ids = sample_indices(&mut stream(cfg.seed, "batch", step as u64), cfg.gallery_size, b).into_vec();
        let make = |j: usize| -> Result<(Image, BBox, Image, BBox)> {
            let mut rng = stream(cfg.seed, "compose", (step * b + j) as u64);
            let id = ids[j];
            if cfg.mode == TrainMode::BaselineHolistic {
                let img = self.gallery.get(id)?;
                let full = BBox::full(cfg.composite_size, cfg.composite_size);
                let q = augment_view(img, &self.augment, &mut rng);
                let k = augment_view(img, &self.augment, &mut rng);
                Ok((q, full, k, full))
            } else {
                let (q, k) = make_pair(&self.gallery, id, &self.augment, &self.composition, &mut rng)?;
                Ok((q.image, q.bbox, k.image, k.bbox))
            }
        };
        let threads = self.threads.min(b).max(1);
        let samples: Vec<(Image, BBox, Image, BBox)> = if threads == 1 {
            (0..b).map(make).collect::<Result<_>>()?
        } else {
            let chunk = b.div_ceil(threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..b)
                    .step_by(chunk)
                    .map(|start| {
                        let make = &make;
                        s.spawn(move || (start..(start + chunk).min(b)).map(make).collect::<Result<Vec<_>>>())
                    })
                    .collect();
                let mut all = Vec::with_capacity(b);
                for h in handles {
                    all.extend(h.join().expect("batch worker panicked")?);
                }
                Ok::<_, Error>(all)
            })?
        };
        let qi: Vec<&Image> = samples.iter().map(|s| &s.0).collect();
        let ki: Vec<&Image> = samples.iter().map(|s| &s.2).collect();
        Ok((
            PairBatch {
                query_images: images_to_tensor(&qi)?,
                query_boxes: samples.iter().map(|s| s.1).collect(),
                key_images: images_to_tensor(&ki)?,
                key_boxes: samples.iter().map(|s| s.3).collect(),
            },
            ids,
        ))
    }

    /// Runs one step: loss, SGD on the query encoder, EMA on the key
    /// encoder, enqueue.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        self.train_step_inner(step).map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })
    }

    fn train_step_inner(&mut self, step: usize) -> Result<StepRecord> {
        let cfg = &self.config;
        let lr = cosine_lr(step, cfg.steps, cfg.lr);
        let (batch, _) = self.build_batch(step)?;
        self.pair.query.zero_grad();
        let mut rng = stream(cfg.seed, "boxaug", step as u64);
        let out = insloc_step_loss(
            &mut self.pair,
            &batch,
            &mut self.queues,
            cfg.tau,
            &self.box_aug,
            &mut rng,
        )?;
        for ((_, p), v) in self.pair.query.params_mut().into_iter().zip(&mut self.velocity) {
            sgd_step(&mut p.value, &p.grad, v, lr, cfg.sgd_momentum, cfg.weight_decay)?;
        }
        self.pair.momentum_update()?;
        self.step += 1;
        Ok(StepRecord {
            step,
            loss: out.loss,
            lr,
            positive_similarity: out.positive_similarity,
        })
    }

    /// Steps until `target` steps are complete (capped at the configured
    /// total), calling `on_step` after each.
    pub fn run_until(&mut self, target: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let target = target.min(self.config.steps);
        let mut records = Vec::with_capacity(target.saturating_sub(self.step));
        while self.step < target {
            let r = self.train_step()?;
            on_step(&r);
            records.push(r);
        }
        Ok(records)
    }

    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        self.run_until(self.config.steps, |_| {})
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let text = self.config.render();
        let mut blobs = vec![Blob::from_u32("config", text.bytes().map(u32::from).collect())];
        for (prefix, net) in [("query", &self.pair.query), ("key", &self.pair.key)] {
            for (name, p) in net.params() {
                blobs.push(Blob::from_tensor(format!("{prefix}/{name}"), &p.value));
            }
        }
        for ((name, _), v) in self.pair.query.params().into_iter().zip(&self.velocity) {
            blobs.push(Blob::from_tensor(format!("velocity/{name}"), v));
        }
        for (l, q) in self.queues.iter().enumerate() {
            let rows = Tensor::from_vec(&[q.capacity(), q.dim()], q.storage().to_vec()).expect("queue storage shape");
            blobs.push(Blob::from_tensor(format!("queue{l}/rows"), &rows));
            blobs.push(Blob::from_u32(
                format!("queue{l}/state"),
                vec![q.cursor() as u32, q.filled() as u32],
            ));
        }
        Checkpoint {
            config_hash: config_hash(&text),
            step: self.step as u64,
            blobs,
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Restores the full training state saved by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = checkpoint_config(ckpt)?;
        let mut t = Trainer::new(config)?;
        load_params(&mut t.pair.query, ckpt, "query")?;
        load_params(&mut t.pair.key, ckpt, "key")?;
        let names: Vec<String> = t.pair.query.params().into_iter().map(|(n, _)| n).collect();
        for (name, v) in names.iter().zip(&mut t.velocity) {
            let loaded = ckpt.blob(&format!("velocity/{name}"))?.to_tensor()?;
            loaded.ensure_same_shape("checkpoint velocity", v)?;
            *v = loaded;
        }
        for (l, q) in t.queues.iter_mut().enumerate() {
            let rows = ckpt.blob(&format!("queue{l}/rows"))?.to_tensor()?;
            let state = ckpt.blob(&format!("queue{l}/state"))?.as_u32()?;
            if state.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "queue{l}/state has {} values",
                    state.len()
                )));
            }
            rows.ensure_shape("checkpoint queue", &[q.capacity(), q.dim()])?;
            *q = MemoryQueue::from_parts(
                q.capacity(),
                q.dim(),
                rows.into_vec(),
                state[0] as usize,
                state[1] as usize,
            )?;
        }
        t.step = usize::try_from(ckpt.step).map_err(|_| Error::InvalidArgument("step overflows usize".into()))?;
        Ok(t)
    }
}

/// Training config stored in a checkpoint, verified against its hash.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let bytes: Vec<u8> = ckpt
        .blob("config")?
        .as_u32()?
        .iter()
        .map(|&c| u8::try_from(c).map_err(|_| Error::InvalidArgument("config blob is not bytes".into())))
        .collect::<Result<_>>()?;
    let text = String::from_utf8(bytes).map_err(|_| Error::InvalidArgument("config blob is not UTF-8".into()))?;
    if config_hash(&text) != ckpt.config_hash {
        return Err(Error::InvalidArgument(format!(
            "config hash {:016x} does not match stored config ({:016x})",
            ckpt.config_hash,
            config_hash(&text)
        )));
    }
    parse_train(&text)
}

fn load_params(net: &mut Backbone<f32>, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    for (name, p) in net.params_mut() {
        let loaded = ckpt.blob(&format!("{prefix}/{name}"))?.to_tensor()?;
        loaded.ensure_same_shape("checkpoint parameter", &p.value)?;
        p.value = loaded;
    }
    Ok(())
}

/// Query encoder and config from a checkpoint, for evaluation.
pub fn load_query_encoder(ckpt: &Checkpoint) -> Result<(TrainConfig, Backbone<f32>)> {
    let config = checkpoint_config(ckpt)?;
    let mut net = Backbone::new(config.backbone_config(), &mut stream(config.seed, "init", 0))?;
    load_params(&mut net, ckpt, "query")?;
    Ok((config, net))
}

/// Trains a fresh run to completion, writing metrics lines to `metrics` if
/// given.
pub fn pretrain(config: TrainConfig, metrics: Option<&mut dyn Write>) -> Result<(Trainer, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config)?;
    let mut io_err = None;
    let records = match metrics {
        Some(w) => trainer.run_until(usize::MAX, |r| {
            if io_err.is_none() {
                if let Err(e) = writeln!(w, "{}", r.tsv()) {
                    io_err = Some(e);
                }
            }
        })?,
        None => trainer.run()?,
    };
    if let Some(e) = io_err {
        return Err(Error::io("metrics stream", e));
    }
    Ok((trainer, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            steps: 6,
            batch_size: 4,
            queue_size: 16,
            gallery_size: 8,
            image_size: 32,
            composite_size: 64,
            backbone: BackboneConfig {
                widths: vec![4, 8, 8, 8],
                fpn_width: 8,
                head_width: 8,
                mlp_hidden: 16,
                embed_dim: 8,
                roi_size: 3,
                ..BackboneConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_examples_and_monotonicity() {
        assert_eq!(cosine_lr(0, 100, 0.03), 0.03);
        assert!(cosine_lr(100, 100, 0.03).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.03) - 0.015).abs() < 1e-15);
        for s in 0..100 {
            assert!(cosine_lr(s + 1, 100, 0.03) <= cosine_lr(s, 100, 0.03));
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);

        let g = Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap();
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.01).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 * (0.5 + 0.01))).abs() < 1e-15);
        assert!((p.data()[1] - (-2.0 - 0.1 * (0.25 - 0.02))).abs() < 1e-15);

        // Two steps of constant gradient, no decay.
        let mut p = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        let g = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p.data()[0] - -(0.1 * (2.0 + 1.9 * 2.0))).abs() < 1e-15);

        // Plain gradient descent.
        let mut p = Tensor::from_vec(&[1], vec![3.0f64]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &g, &mut v, 0.25, 0.0, 0.0).unwrap();
        assert_eq!(p.data()[0], 3.0 - 0.25 * 2.0);
        assert!(sgd_step(&mut p, &Tensor::zeros(&[2]), &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn zero_steps_leave_initialization() {
        let cfg = TrainConfig {
            steps: 0,
            ..small_config(TrainMode::InslocC4)
        };
        let (t, records) = pretrain(cfg.clone(), None).unwrap();
        assert!(records.is_empty());
        let fresh = Backbone::<f32>::new(cfg.backbone_config(), &mut stream(cfg.seed, "init", 0)).unwrap();
        assert_eq!(t.pair.query, fresh);
        assert_eq!(t.pair.key, fresh);
    }

    #[test]
    fn runs_are_deterministic_for_any_thread_count() {
        for mode in [TrainMode::InslocC4, TrainMode::InslocFpn, TrainMode::BaselineHolistic] {
            let mut a = Trainer::new(small_config(mode)).unwrap();
            a.set_threads(1);
            let mut b = Trainer::new(small_config(mode)).unwrap();
            b.set_threads(3);
            let ra = a.run_until(3, |_| {}).unwrap();
            let rb = b.run_until(3, |_| {}).unwrap();
            assert_eq!(ra, rb, "{mode}");
            assert_eq!(a.pair, b.pair);
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        let cfg = small_config(TrainMode::InslocFpn);
        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.run().unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.run_until(2, |_| {}).unwrap();
        let bytes = first.to_checkpoint().encode();
        let ckpt = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(Trainer::from_checkpoint(&ckpt).unwrap().to_checkpoint().encode(), bytes);
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.to_checkpoint().encode(), full.to_checkpoint().encode());
    }

    #[test]
    fn checkpoint_with_edited_config_is_rejected() {
        let t = Trainer::new(small_config(TrainMode::InslocC4)).unwrap();
        let mut ckpt = t.to_checkpoint();
        ckpt.config_hash ^= 1;
        assert!(Trainer::from_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn metrics_lines_are_tab_separated() {
        let cfg = TrainConfig {
            steps: 2,
            ..small_config(TrainMode::BaselineHolistic)
        };
        let mut out = Vec::new();
        pretrain(cfg, Some(&mut out)).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let fields: Vec<&str> = lines[1].split('\t').collect();
        assert_eq!(fields[0], "1");
        assert!(fields[1].parse::<f64>().unwrap() > 0.0);
        assert_eq!(fields[2].parse::<f64>().unwrap(), cosine_lr(1, 2, 0.03));
    }

    #[test]
    fn baseline_pools_the_whole_view() {
        let t = Trainer::new(small_config(TrainMode::BaselineHolistic)).unwrap();
        let (batch, ids) = t.build_batch(0).unwrap();
        assert!(batch.query_boxes.iter().all(|b| *b == BBox::full(64, 64)));
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
    }

    #[test]
    fn modes_share_parameter_shapes() {
        let c4 = Trainer::new(small_config(TrainMode::InslocC4)).unwrap();
        let base = Trainer::new(small_config(TrainMode::BaselineHolistic)).unwrap();
        let shapes = |t: &Trainer| -> Vec<Vec<usize>> {
            t.pair
                .query
                .params()
                .iter()
                .map(|(_, p)| p.value.shape().to_vec())
                .collect()
        };
        assert_eq!(shapes(&c4), shapes(&base));
    }
}
