//! Hand-wired differentiable layers and the C4 / FPN toy backbones.
//!
//! Every layer keeps its parameters next to a gradient buffer of the same
//! shape. Forward passes never mutate a layer; backward passes only add into
//! gradient buffers.

mod backbone;
mod conv;
mod linear;
mod ops;

pub use backbone::{Backbone, BackboneConfig, FeatureTrace, Head, HeadTrace, Variant, FPN_LEVELS};
pub use conv::{conv_output_size, Conv2d};
pub use linear::{Linear, MlpCache, MlpHead};
pub use ops::{
    global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward, max_pool2d, max_pool2d_backward,
    relu, relu_backward, standardize_channels, standardize_channels_backward, upsample_nearest2x,
    upsample_nearest2x_backward, Standardized, NORM_EPS,
};

use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Named access to the parameters of a layer or a composite model.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<(String, &Param<T>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

pub(crate) fn prefixed<'a, P>(prefix: &str, items: Vec<(String, P)>) -> Vec<(String, P)>
where
    P: 'a,
{
    items
        .into_iter()
        .map(|(name, p)| (format!("{prefix}.{name}"), p))
        .collect()
}

/// Uniform fan-in initialisation, bound `sqrt(6 / fan_in)`.
pub(crate) fn fan_in_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}
