use rand::Rng;

use super::{
    global_avg_pool, global_avg_pool_backward, prefixed, relu, relu_backward, standardize_channels,
    standardize_channels_backward, upsample_nearest2x, upsample_nearest2x_backward, Conv2d, MlpCache, MlpHead, Module,
    Param, Standardized,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One pooled map after the last stage; a convolutional stage plus the
    /// MLP run after pooling.
    C4,
    /// Four-level pyramid with lateral connections; a shared MLP runs on
    /// every level's pooled features.
    Fpn,
}

/// Number of pyramid levels produced by the FPN variant.
pub const FPN_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Output width of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Convolutions per stage; the first one downsamples.
    pub convs_per_stage: usize,
    /// Common channel width of the pyramid maps.
    pub fpn_width: usize,
    /// Width of the post-pooling convolution (C4 only).
    pub head_width: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    /// Pooled grid side, needed to size the FPN head's input.
    pub roi_size: usize,
    /// Parameter-free per-channel standardization after every convolution.
    pub standardize: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: Variant::C4,
            widths: vec![16, 32, 64, 64],
            convs_per_stage: 2,
            fpn_width: 64,
            head_width: 128,
            mlp_hidden: 128,
            embed_dim: 128,
            roi_size: 7,
            standardize: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("backbone config: {m}")));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.convs_per_stage == 0 || self.roi_size == 0 {
            return bad("convs_per_stage and roi_size must be positive");
        }
        if self.mlp_hidden == 0 || self.embed_dim == 0 || self.head_width == 0 {
            return bad("head widths must be positive");
        }
        if self.variant == Variant::Fpn && (self.widths.len() != FPN_LEVELS || self.fpn_width == 0) {
            return bad("FPN needs exactly 4 stage widths and a positive fpn_width");
        }
        Ok(())
    }

    /// Stride of the coarsest map; input sides must be multiples of it.
    pub fn total_stride(&self) -> usize {
        match self.variant {
            Variant::C4 => 1 << self.widths.len(),
            Variant::Fpn => 1 << (self.widths.len() + 1),
        }
    }

    /// Strides of the maps handed to RoIAlign, finest first.
    pub fn feature_strides(&self) -> Vec<usize> {
        match self.variant {
            Variant::C4 => vec![self.total_stride()],
            Variant::Fpn => (2..2 + FPN_LEVELS).map(|l| 1 << l).collect(),
        }
    }

    pub fn feature_channels(&self) -> usize {
        match self.variant {
            Variant::C4 => *self.widths.last().unwrap(),
            Variant::Fpn => self.fpn_width,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let mut total = 0;
        let mut prev = 3;
        for &w in &self.widths {
            total += conv(prev, w, 3) + (self.convs_per_stage - 1) * conv(w, w, 3);
            prev = w;
        }
        let mlp = |i: usize| i * self.mlp_hidden + self.mlp_hidden + self.mlp_hidden * self.embed_dim + self.embed_dim;
        match self.variant {
            Variant::C4 => total + conv(prev, self.head_width, 3) + mlp(self.head_width),
            Variant::Fpn => {
                total += self.convs_per_stage * conv(prev, prev, 3);
                let lateral_inputs = [self.widths[1], self.widths[2], self.widths[3], self.widths[3]];
                total += lateral_inputs
                    .iter()
                    .map(|&c| conv(c, self.fpn_width, 1))
                    .sum::<usize>();
                total + mlp(self.roi_size * self.roi_size * self.fpn_width)
            }
        }
    }
}

/// Post-pooling network.
#[derive(Debug, Clone, PartialEq)]
pub enum Head<T = f32> {
    C4 { res5: Conv2d<T>, mlp: MlpHead<T> },
    Fpn { mlp: MlpHead<T> },
}

#[derive(Debug, Clone)]
pub enum HeadTrace<T = f32> {
    C4 {
        pooled: Tensor<T>,
        res5_out: Tensor<T>,
        mlp: MlpCache<T>,
    },
    Fpn {
        pooled_shape: Vec<usize>,
        mlp: MlpCache<T>,
    },
}

impl<T: Scalar> Head<T> {
    /// `[B, C, P, P]` pooled region features to `[B, D]` unnormalized embeddings.
    pub fn forward(&self, pooled: &Tensor<T>) -> Result<(Tensor<T>, HeadTrace<T>)> {
        match self {
            Head::C4 { res5, mlp } => {
                let res5_out = relu(&res5.forward(pooled)?);
                let (emb, cache) = mlp.forward(&global_avg_pool(&res5_out)?)?;
                Ok((
                    emb,
                    HeadTrace::C4 {
                        pooled: pooled.clone(),
                        res5_out,
                        mlp: cache,
                    },
                ))
            }
            Head::Fpn { mlp } => {
                if pooled.rank() != 4 {
                    return Err(Error::shape("fpn head", pooled.shape(), &[mlp.input_width()]));
                }
                let b = pooled.dim(0);
                let flat = pooled.clone().reshape(&[b, pooled.len() / b])?;
                let (emb, cache) = mlp.forward(&flat)?;
                Ok((
                    emb,
                    HeadTrace::Fpn {
                        pooled_shape: pooled.shape().to_vec(),
                        mlp: cache,
                    },
                ))
            }
        }
    }

    pub fn backward(&mut self, grad_emb: &Tensor<T>, trace: &HeadTrace<T>) -> Result<Tensor<T>> {
        match (self, trace) {
            (
                Head::C4 { res5, mlp },
                HeadTrace::C4 {
                    pooled,
                    res5_out,
                    mlp: cache,
                },
            ) => {
                let g_gap = mlp.backward(grad_emb, cache)?;
                let g_res5 = global_avg_pool_backward(&g_gap, res5_out.shape())?;
                let g_pre = relu_backward(&g_res5, res5_out)?;
                res5.backward(&g_pre, pooled)
            }
            (
                Head::Fpn { mlp },
                HeadTrace::Fpn {
                    pooled_shape,
                    mlp: cache,
                },
            ) => mlp.backward(grad_emb, cache)?.reshape(pooled_shape),
            _ => Err(Error::MissingActivation("head trace of the wrong variant".into())),
        }
    }

    fn cast<U: Scalar>(&self) -> Head<U> {
        match self {
            Head::C4 { res5, mlp } => Head::C4 {
                res5: res5.cast(),
                mlp: mlp.cast(),
            },
            Head::Fpn { mlp } => Head::Fpn { mlp: mlp.cast() },
        }
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        match self {
            Head::C4 { res5, mlp } => {
                let mut out = prefixed("res5", res5.params());
                out.extend(prefixed("mlp", mlp.params()));
                out
            }
            Head::Fpn { mlp } => prefixed("mlp", mlp.params()),
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        match self {
            Head::C4 { res5, mlp } => {
                let mut out = prefixed("res5", res5.params_mut());
                out.extend(prefixed("mlp", mlp.params_mut()));
                out
            }
            Head::Fpn { mlp } => prefixed("mlp", mlp.params_mut()),
        }
    }
}

/// Convolutional trunk (plus FPN laterals) and the post-pooling head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T = f32> {
    pub config: BackboneConfig,
    /// Stride-2 stages in order. The FPN variant appends one extra stage.
    pub stages: Vec<Vec<Conv2d<T>>>,
    pub fpn_lateral: Vec<Conv2d<T>>,
    pub head: Head<T>,
}

#[derive(Debug, Clone)]
struct UnitTrace<T> {
    input: Tensor<T>,
    standardized: Option<Standardized<T>>,
    output: Tensor<T>,
}

/// Activations saved by [`Backbone::features`] for the backward pass.
#[derive(Debug, Clone)]
pub struct FeatureTrace<T = f32> {
    units: Vec<UnitTrace<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut prev = 3;
        let mut stage_widths = config.widths.clone();
        if config.variant == Variant::Fpn {
            stage_widths.push(*config.widths.last().unwrap());
        }
        for &w in &stage_widths {
            let mut stage = vec![Conv2d::new(prev, w, 3, 2, 1, rng)];
            for _ in 1..config.convs_per_stage {
                stage.push(Conv2d::new(w, w, 3, 1, 1, rng));
            }
            stages.push(stage);
            prev = w;
        }
        let (fpn_lateral, head) = match config.variant {
            Variant::C4 => (
                Vec::new(),
                Head::C4 {
                    res5: Conv2d::new(prev, config.head_width, 3, 2, 1, rng),
                    mlp: MlpHead::new(config.head_width, config.mlp_hidden, config.embed_dim, rng),
                },
            ),
            Variant::Fpn => {
                let lateral = stage_widths[1..]
                    .iter()
                    .map(|&c| Conv2d::new(c, config.fpn_width, 1, 1, 0, rng))
                    .collect();
                let input = config.roi_size * config.roi_size * config.fpn_width;
                (
                    lateral,
                    Head::Fpn {
                        mlp: MlpHead::new(input, config.mlp_hidden, config.embed_dim, rng),
                    },
                )
            }
        };
        Ok(Backbone {
            config,
            stages,
            fpn_lateral,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn check_input(&self, img: &Tensor<T>) -> Result<()> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "backbone expects [B, 3, H, W]".into(),
            });
        }
        let stride = self.config.total_stride();
        if s[2] == 0 || s[3] == 0 || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("spatial size must be a positive multiple of total stride {stride}"),
            });
        }
        Ok(())
    }

    /// Feature maps for RoI pooling: one for C4, four (finest first) for FPN.
    pub fn features(&self, img: &Tensor<T>) -> Result<(Vec<Tensor<T>>, FeatureTrace<T>)> {
        self.check_input(img)?;
        let mut units = Vec::new();
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let mut x = img.clone();
        for stage in &self.stages {
            for conv in stage {
                let pre = conv.forward(&x)?;
                let (z, standardized) = if self.config.standardize {
                    let s = standardize_channels(&pre)?;
                    (s.output.clone(), Some(s))
                } else {
                    (pre, None)
                };
                let out = relu(&z);
                units.push(UnitTrace {
                    input: std::mem::replace(&mut x, out.clone()),
                    standardized,
                    output: out,
                });
            }
            stage_outputs.push(x.clone());
        }
        let maps = match self.config.variant {
            Variant::C4 => vec![x],
            Variant::Fpn => {
                let laterals = self
                    .fpn_lateral
                    .iter()
                    .zip(&stage_outputs[1..])
                    .map(|(conv, c)| conv.forward(c))
                    .collect::<Result<Vec<_>>>()?;
                let mut maps: Vec<Tensor<T>> = Vec::with_capacity(FPN_LEVELS);
                let mut top: Option<Tensor<T>> = None;
                for lateral in laterals.into_iter().rev() {
                    let p = match top {
                        Some(t) => lateral.add(&upsample_nearest2x(&t))?,
                        None => lateral,
                    };
                    maps.push(p.clone());
                    top = Some(p);
                }
                maps.reverse();
                maps
            }
        };
        Ok((maps, FeatureTrace { units }))
    }

    /// Backpropagates map gradients through the trunk; returns the image
    /// gradient.
    pub fn features_backward(&mut self, grad_maps: &[Tensor<T>], trace: &FeatureTrace<T>) -> Result<Tensor<T>> {
        let n_units: usize = self.stages.iter().map(Vec::len).sum();
        if trace.units.len() != n_units {
            return Err(Error::MissingActivation(format!(
                "backbone trace holds {} of {} conv activations",
                trace.units.len(),
                n_units
            )));
        }
        let expected_maps = self.config.feature_strides().len();
        if grad_maps.len() != expected_maps {
            return Err(Error::InvalidArgument(format!(
                "expected {expected_maps} map gradients, got {}",
                grad_maps.len()
            )));
        }
        // Gradient w.r.t. each stage output.
        let mut stage_grads: Vec<Option<Tensor<T>>> = vec![None; self.stages.len()];
        match self.config.variant {
            Variant::C4 => stage_grads[self.stages.len() - 1] = Some(grad_maps[0].clone()),
            Variant::Fpn => {
                let mut ends = Vec::new();
                let mut idx = 0;
                for stage in &self.stages {
                    idx += stage.len();
                    ends.push(idx - 1);
                }
                let mut carry: Option<Tensor<T>> = None;
                for level in 0..FPN_LEVELS {
                    let mut g = grad_maps[level].clone();
                    if let Some(c) = carry.take() {
                        g.add_assign(&upsample_nearest2x_backward(&c))?;
                    }
                    let stage = level + 1;
                    let input = &trace.units[ends[stage]].output;
                    let gc = self.fpn_lateral[level].backward(&g, input)?;
                    stage_grads[stage] = Some(gc);
                    carry = Some(g);
                }
            }
        }
        let mut unit = n_units;
        let mut running: Option<Tensor<T>> = None;
        for (s, stage) in self.stages.iter_mut().enumerate().rev() {
            if let Some(g) = stage_grads[s].take() {
                running = Some(match running {
                    Some(mut r) => {
                        r.add_assign(&g)?;
                        r
                    }
                    None => g,
                });
            }
            for conv in stage.iter_mut().rev() {
                unit -= 1;
                let t = &trace.units[unit];
                let g = running
                    .take()
                    .ok_or_else(|| Error::MissingActivation("no gradient reached the stage output".into()))?;
                let mut g = relu_backward(&g, &t.output)?;
                if let Some(s) = &t.standardized {
                    g = standardize_channels_backward(&g, s)?;
                }
                running = Some(conv.backward(&g, &t.input)?);
            }
        }
        running.ok_or_else(|| Error::MissingActivation("empty backbone".into()))
    }

    /// Widens or narrows the element type, e.g. to run an `f64` reference path.
    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(Conv2d::cast).collect())
                .collect(),
            fpn_lateral: self.fpn_lateral.iter().map(Conv2d::cast).collect(),
            head: self.head.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, conv) in stage.iter().enumerate() {
                out.extend(prefixed(&format!("stage{i}.conv{j}"), conv.params()));
            }
        }
        for (i, conv) in self.fpn_lateral.iter().enumerate() {
            out.extend(prefixed(&format!("lateral{i}"), conv.params()));
        }
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, conv) in stage.iter_mut().enumerate() {
                out.extend(prefixed(&format!("stage{i}.conv{j}"), conv.params_mut()));
            }
        }
        for (i, conv) in self.fpn_lateral.iter_mut().enumerate() {
            out.extend(prefixed(&format!("lateral{i}"), conv.params_mut()));
        }
        out.extend(prefixed("head", self.head.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_difference, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant) -> BackboneConfig {
        BackboneConfig {
            variant,
            widths: vec![3, 4, 4, 5],
            convs_per_stage: 2,
            fpn_width: 3,
            head_width: 4,
            mlp_hidden: 5,
            embed_dim: 3,
            roi_size: 2,
            standardize: false,
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for variant in [Variant::C4, Variant::Fpn] {
            for cfg in [
                BackboneConfig {
                    variant,
                    ..Default::default()
                },
                small(variant),
            ] {
                let net = Backbone::<f32>::new(cfg.clone(), &mut rng).unwrap();
                assert_eq!(net.num_params(), cfg.param_count());
            }
        }
    }

    #[test]
    fn fpn_map_sizes_follow_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig {
            variant: Variant::Fpn,
            ..Default::default()
        };
        assert_eq!(cfg.feature_strides(), vec![4, 8, 16, 32]);
        let net = Backbone::<f32>::new(cfg, &mut rng).unwrap();
        let (maps, _) = net.features(&Tensor::zeros(&[2, 3, 64, 64])).unwrap();
        let sizes: Vec<_> = maps.iter().map(|m| (m.dim(1), m.dim(2), m.dim(3))).collect();
        assert_eq!(sizes, vec![(64, 16, 16), (64, 8, 8), (64, 4, 4), (64, 2, 2)]);
    }

    #[test]
    fn c4_exposes_single_stride_16_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Backbone::<f32>::new(BackboneConfig::default(), &mut rng).unwrap();
        let (maps, _) = net.features(&Tensor::full(&[1, 3, 64, 64], 0.3)).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].shape(), &[1, 64, 4, 4]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Backbone::<f32>::new(BackboneConfig::default(), &mut rng).unwrap();
        assert!(net.features(&Tensor::zeros(&[1, 3, 60, 64])).is_err());
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Backbone::<f32>::new(small(Variant::Fpn), &mut rng).unwrap();
        for (_, p) in net.params_mut() {
            p.value.fill(0.0);
        }
        let (maps, _) = net.features(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert!(maps.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn shapes_do_not_depend_on_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Backbone::<f32>::new(small(Variant::Fpn), &mut rng).unwrap();
        let a = net.features(&Tensor::zeros(&[1, 3, 32, 32])).unwrap().0;
        let b = net.features(&Tensor::full(&[1, 3, 32, 32], 0.9)).unwrap().0;
        let shapes = |m: &[Tensor<f32>]| m.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        assert_eq!(shapes(&a), shapes(&b));
    }

    #[test]
    fn missing_activation_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Backbone::<f64>::new(small(Variant::C4), &mut rng).unwrap();
        let (maps, _) = net.features(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let empty = FeatureTrace { units: Vec::new() };
        assert!(matches!(
            net.features_backward(&maps, &empty),
            Err(Error::MissingActivation(_))
        ));
    }

    fn check_trunk_gradient(variant: Variant, standardize: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = BackboneConfig {
            standardize,
            ..small(variant)
        };
        let mut net = Backbone::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.gen_range(-1.0..1.0));
        let (maps, trace) = net.features(&x).unwrap();
        let gs: Vec<Tensor<f64>> = maps
            .iter()
            .map(|m| Tensor::from_fn(m.shape(), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let objective = |n: &Backbone<f64>| {
            let (m, _) = n.features(&x).unwrap();
            m.iter().zip(&gs).map(|(a, b)| a.dot(b).unwrap()).sum::<f64>()
        };
        net.features_backward(&gs, &trace).unwrap();
        let w = net.stages[0][0].weight.value.clone();
        let fd = finite_difference(&w, 1e-6, |w| {
            let mut n = net.clone();
            n.stages[0][0].weight.value = w.clone();
            objective(&n)
        });
        let err = max_rel_error(&net.stages[0][0].weight.grad, &fd);
        assert!(err < 1e-6, "{variant:?} standardize={standardize}: {err}");
    }

    #[test]
    fn trunk_gradients_match_finite_differences() {
        check_trunk_gradient(Variant::C4, false);
        check_trunk_gradient(Variant::Fpn, false);
        check_trunk_gradient(Variant::C4, true);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Backbone::<f32>::new(BackboneConfig::default(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 7) % 13) as f32 / 13.0);
        assert_eq!(net.features(&x).unwrap().0, net.features(&x).unwrap().0);
    }
}
