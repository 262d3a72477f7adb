//! Flat `key = value` run configuration shared by the library and the CLI.
//!
//! Every key is listed in [`KEYS`]; values are parsed and range-checked as
//! they are set, and cross-key constraints are checked by
//! [`RunConfig::validate`].

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::AugmentParams;
use crate::nn::{BackboneConfig, Variant};
use crate::probes::ProbeConfig;
use crate::trainer::{QueueInit, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    /// Affects training; part of the checkpoint config hash.
    Train,
    Probe,
    Output,
}

pub struct KeyInfo {
    pub key: &'static str,
    pub section: Section,
    pub help: &'static str,
}

const fn key(key: &'static str, section: Section, help: &'static str) -> KeyInfo {
    KeyInfo { key, section, help }
}

use Section::{Output, Probe, Train};

pub const KEYS: &[KeyInfo] = &[
    key("mode", Train, "insloc-c4 | insloc-fpn | baseline-holistic"),
    key("steps", Train, "training iterations"),
    key("batch_size", Train, "instances per step, sampled without replacement"),
    key("lr", Train, "base learning rate of the cosine schedule"),
    key("sgd_momentum", Train, "SGD momentum"),
    key("weight_decay", Train, "L2 weight decay, applied to every parameter"),
    key("tau", Train, "InfoNCE temperature"),
    key("queue_size", Train, "negatives per memory queue"),
    key(
        "queue_init",
        Train,
        "random (full of random unit vectors) | grow (starts empty)",
    ),
    key("ema_momentum", Train, "key encoder momentum m"),
    key("seed", Train, "root seed of every random stream"),
    key("gallery_size", Train, "number of procedural instances K"),
    key("image_size", Train, "side of each gallery image"),
    key("composite_size", Train, "side of composites and views"),
    key("fg_scale_min", Train, "smallest pasted shorter side, pixels"),
    key("fg_scale_max", Train, "largest pasted shorter side, pixels"),
    key(
        "aspect_min",
        Train,
        "smallest pasted w/h, or auto (1/3 for C4, 1/2 for FPN)",
    ),
    key("aspect_max", Train, "largest pasted w/h, or auto (3 for C4, 2 for FPN)"),
    key("box_aug", Train, "replace the query box by a random high-IoU anchor"),
    key(
        "box_aug_iou",
        Train,
        "IoU an anchor must exceed to replace the query box",
    ),
    key("anchor_strides", Train, "anchor grid strides, comma separated"),
    key("anchor_scales", Train, "anchor sizes sqrt(w*h), comma separated"),
    key("anchor_ratios", Train, "anchor w/h ratios, comma separated"),
    key("widths", Train, "output width of each backbone stage (FPN needs 4)"),
    key("convs_per_stage", Train, "3x3 convolutions per stage"),
    key("fpn_width", Train, "pyramid channel width"),
    key("head_width", Train, "C4 post-pooling convolution width"),
    key("mlp_hidden", Train, "projection MLP hidden width"),
    key("embed_dim", Train, "embedding dimension"),
    key("roi_size", Train, "RoIAlign output grid side"),
    key(
        "standardize",
        Train,
        "per-channel standardization after each convolution",
    ),
    key(
        "crop_area_min",
        Train,
        "smallest random crop as a fraction of the image area",
    ),
    key(
        "crop_area_max",
        Train,
        "largest random crop as a fraction of the image area",
    ),
    key("brightness", Train, "color jitter brightness strength"),
    key("contrast", Train, "color jitter contrast strength"),
    key("saturation", Train, "color jitter saturation strength"),
    key("grayscale_p", Train, "grayscale probability"),
    key("blur_p", Train, "Gaussian blur probability"),
    key("flip_p", Train, "horizontal flip probability"),
    key("probe_m", Probe, "localization patches M, a perfect square"),
    key("probe_steps", Probe, "gradient descent steps of each linear probe"),
    key("probe_lr", Probe, "linear probe learning rate"),
    key(
        "probe_eval_fraction",
        Probe,
        "fraction of gallery images held out for localization",
    ),
    key(
        "probe_train_views",
        Probe,
        "augmented training views per instance for classification",
    ),
    key(
        "probe_eval_views",
        Probe,
        "augmented held-out views per instance for classification",
    ),
    key("probe_seed", Probe, "seed of the probe splits and views"),
    key(
        "isolated_patches",
        Probe,
        "forward each patch alone instead of pooling it from the full image",
    ),
    key(
        "probe_whiten",
        Probe,
        "decorrelate standardized features before fitting the probe",
    ),
    key("out_dir", Output, "directory for checkpoint, metrics and composites"),
    key("compose_count", Output, "composites written by the compose command"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub out_dir: PathBuf,
    pub compose_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            compose_count: 8,
        }
    }
}

fn err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| err(key, format!("cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

fn positive_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(key, v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(err(key, format!("{x} must be positive and finite")))
    }
}

fn unit_interval(key: &str, v: &str, closed_top: bool) -> Result<f64> {
    let x: f64 = parse(key, v)?;
    let ok = x >= 0.0 && if closed_top { x <= 1.0 } else { x < 1.0 };
    if ok {
        Ok(x)
    } else {
        let top = if closed_top { "1]" } else { "1)" };
        Err(err(key, format!("{x} outside [0, {top}")))
    }
}

fn nonneg_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(key, v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(err(key, format!("{x} must be non-negative")))
    }
}

fn positive_usize(key: &str, v: &str) -> Result<usize> {
    match parse::<usize>(key, v)? {
        0 => Err(err(key, "must be at least 1")),
        n => Ok(n),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(err(key, format!("`{v}` is not a boolean"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| item(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(err(key, "list must not be empty"));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn auto_or(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Parses and range-checks one value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let p = &mut self.probe;
        match key {
            "mode" => t.mode = v.parse().map_err(|m: String| err(key, m))?,
            "steps" => t.steps = parse(key, v)?,
            "batch_size" => t.batch_size = positive_usize(key, v)?,
            "lr" => t.lr = positive_f64(key, v)?,
            "sgd_momentum" => t.sgd_momentum = unit_interval(key, v, false)?,
            "weight_decay" => t.weight_decay = nonneg_f64(key, v)?,
            "tau" => t.tau = positive_f64(key, v)?,
            "queue_size" => t.queue_size = positive_usize(key, v)?,
            "queue_init" => {
                t.queue_init = match v {
                    "random" => QueueInit::Random,
                    "grow" => QueueInit::Grow,
                    _ => return Err(err(key, format!("`{v}` is neither random nor grow"))),
                }
            }
            "ema_momentum" => t.ema_momentum = unit_interval(key, v, true)?,
            "seed" => t.seed = parse(key, v)?,
            "gallery_size" => t.gallery_size = positive_usize(key, v)?,
            "image_size" => t.image_size = positive_usize(key, v)?,
            "composite_size" => t.composite_size = positive_usize(key, v)?,
            "fg_scale_min" => t.fg_scale.0 = positive_f64(key, v)?,
            "fg_scale_max" => t.fg_scale.1 = positive_f64(key, v)?,
            "aspect_min" | "aspect_max" => {
                let x = if v == "auto" { None } else { Some(positive_f64(key, v)?) };
                if key == "aspect_min" {
                    t.aspect_min = x;
                } else {
                    t.aspect_max = x;
                }
            }
            "box_aug" => t.box_aug = boolean(key, v)?,
            "box_aug_iou" => t.box_aug_iou = unit_interval(key, v, false)?,
            "anchor_strides" => t.anchors.strides = list(key, v, positive_usize)?,
            "anchor_scales" => t.anchors.scales = list(key, v, positive_f64)?,
            "anchor_ratios" => t.anchors.aspect_ratios = list(key, v, positive_f64)?,
            "widths" => t.backbone.widths = list(key, v, positive_usize)?,
            "convs_per_stage" => t.backbone.convs_per_stage = positive_usize(key, v)?,
            "fpn_width" => t.backbone.fpn_width = positive_usize(key, v)?,
            "head_width" => t.backbone.head_width = positive_usize(key, v)?,
            "mlp_hidden" => t.backbone.mlp_hidden = positive_usize(key, v)?,
            "embed_dim" => t.backbone.embed_dim = positive_usize(key, v)?,
            "roi_size" => t.backbone.roi_size = positive_usize(key, v)?,
            "standardize" => t.backbone.standardize = boolean(key, v)?,
            "crop_area_min" => t.augment.crop_area.0 = positive_f64(key, v)?,
            "crop_area_max" => t.augment.crop_area.1 = unit_interval(key, v, true)?,
            "brightness" => t.augment.brightness = unit_interval(key, v, false)?,
            "contrast" => t.augment.contrast = unit_interval(key, v, false)?,
            "saturation" => t.augment.saturation = unit_interval(key, v, false)?,
            "grayscale_p" => t.augment.grayscale_p = unit_interval(key, v, true)?,
            "blur_p" => t.augment.blur_p = unit_interval(key, v, true)?,
            "flip_p" => t.augment.flip_p = unit_interval(key, v, true)?,
            "probe_m" => {
                let m = positive_usize(key, v)?;
                if m.isqrt() * m.isqrt() != m {
                    return Err(err(key, format!("{m} is not a perfect square")));
                }
                p.m = m;
            }
            "probe_steps" => p.steps = positive_usize(key, v)?,
            "probe_lr" => p.lr = positive_f64(key, v)?,
            "probe_eval_fraction" => {
                let f = unit_interval(key, v, false)?;
                if f == 0.0 {
                    return Err(err(key, "must be positive"));
                }
                p.eval_fraction = f;
            }
            "probe_train_views" => p.train_views = positive_usize(key, v)?,
            "probe_eval_views" => p.eval_views = positive_usize(key, v)?,
            "probe_seed" => p.seed = parse(key, v)?,
            "isolated_patches" => p.isolated_patches = boolean(key, v)?,
            "probe_whiten" => p.whiten = boolean(key, v)?,
            "out_dir" => {
                if v.is_empty() {
                    return Err(err(key, "must not be empty"));
                }
                self.out_dir = PathBuf::from(v);
            }
            "compose_count" => self.compose_count = parse(key, v)?,
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Canonical text of one value; `set(key, &get(key))` is the identity.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let p = &self.probe;
        Some(match key {
            "mode" => t.mode.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "sgd_momentum" => t.sgd_momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "tau" => t.tau.to_string(),
            "queue_size" => t.queue_size.to_string(),
            "queue_init" => match t.queue_init {
                QueueInit::Random => "random".into(),
                QueueInit::Grow => "grow".into(),
            },
            "ema_momentum" => t.ema_momentum.to_string(),
            "seed" => t.seed.to_string(),
            "gallery_size" => t.gallery_size.to_string(),
            "image_size" => t.image_size.to_string(),
            "composite_size" => t.composite_size.to_string(),
            "fg_scale_min" => t.fg_scale.0.to_string(),
            "fg_scale_max" => t.fg_scale.1.to_string(),
            "aspect_min" => auto_or(t.aspect_min),
            "aspect_max" => auto_or(t.aspect_max),
            "box_aug" => t.box_aug.to_string(),
            "box_aug_iou" => t.box_aug_iou.to_string(),
            "anchor_strides" => join(&t.anchors.strides),
            "anchor_scales" => join(&t.anchors.scales),
            "anchor_ratios" => join(&t.anchors.aspect_ratios),
            "widths" => join(&t.backbone.widths),
            "convs_per_stage" => t.backbone.convs_per_stage.to_string(),
            "fpn_width" => t.backbone.fpn_width.to_string(),
            "head_width" => t.backbone.head_width.to_string(),
            "mlp_hidden" => t.backbone.mlp_hidden.to_string(),
            "embed_dim" => t.backbone.embed_dim.to_string(),
            "roi_size" => t.backbone.roi_size.to_string(),
            "standardize" => t.backbone.standardize.to_string(),
            "crop_area_min" => t.augment.crop_area.0.to_string(),
            "crop_area_max" => t.augment.crop_area.1.to_string(),
            "brightness" => t.augment.brightness.to_string(),
            "contrast" => t.augment.contrast.to_string(),
            "saturation" => t.augment.saturation.to_string(),
            "grayscale_p" => t.augment.grayscale_p.to_string(),
            "blur_p" => t.augment.blur_p.to_string(),
            "flip_p" => t.augment.flip_p.to_string(),
            "probe_m" => p.m.to_string(),
            "probe_steps" => p.steps.to_string(),
            "probe_lr" => p.lr.to_string(),
            "probe_eval_fraction" => p.eval_fraction.to_string(),
            "probe_train_views" => p.train_views.to_string(),
            "probe_eval_views" => p.eval_views.to_string(),
            "probe_seed" => p.seed.to_string(),
            "isolated_patches" => p.isolated_patches.to_string(),
            "probe_whiten" => p.whiten.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "compose_count" => self.compose_count.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(line, format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| err(assignment, "override must look like key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, then the file (if any), then the overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| err("--config", format!("cannot read {}: {e}", path.display())))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            c.apply_override(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Cross-key constraints.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.probe.validate()
    }

    /// `key = value` lines for one section, in table order.
    pub fn render(&self, section: Section) -> String {
        KEYS.iter()
            .filter(|k| k.section == section)
            .map(|k| format!("{} = {}\n", k.key, self.get(k.key).unwrap()))
            .collect()
    }

    pub fn render_all(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.key, self.get(k.key).unwrap()))
            .collect()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.ilck")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.tsv")
    }
}

/// Canonical training text of a train config, used for checkpoint hashing.
pub fn render_train(train: &TrainConfig) -> String {
    RunConfig {
        train: train.clone(),
        ..RunConfig::default()
    }
    .render(Section::Train)
}

/// Inverse of [`render_train`].
pub fn parse_train(text: &str) -> Result<TrainConfig> {
    let mut c = RunConfig::default();
    c.apply_text(text)?;
    c.train.validate()?;
    Ok(c.train)
}

/// Lines of `--help` text: every key, its default and what it does.
pub fn key_help() -> String {
    let d = RunConfig::default();
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::new();
    for k in KEYS {
        out.push_str(&format!(
            "  {:width$}  [default: {}]  {}\n",
            k.key,
            d.get(k.key).unwrap(),
            k.help
        ));
    }
    out
}

pub(crate) fn variant_for(mode: TrainMode) -> Variant {
    match mode {
        TrainMode::InslocFpn => Variant::Fpn,
        TrainMode::InslocC4 | TrainMode::BaselineHolistic => Variant::C4,
    }
}

pub(crate) fn backbone_for(train: &TrainConfig) -> BackboneConfig {
    BackboneConfig {
        variant: variant_for(train.mode),
        ..train.backbone.clone()
    }
}

pub(crate) fn augment_for(train: &TrainConfig) -> AugmentParams {
    AugmentParams {
        view_size: train.composite_size,
        ..train.augment.clone()
    }
}
