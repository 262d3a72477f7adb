use rand::Rng;

use super::{fan_in_uniform, prefixed, relu, relu_backward, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Fully connected layer, `y = x·Wᵀ + b` over `[B, in]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(fan_in_uniform(&[output, input], input, rng)),
            bias: Param::new(Tensor::zeros(&[output])),
        }
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::shape("linear weights", weight.shape(), bias.shape()));
        }
        Ok(Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn input_width(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn output_width(&self) -> usize {
        self.weight.value.dim(0)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.dim(1) != self.input_width() {
            return Err(Error::shape("linear", x.shape(), self.weight.value.shape()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (b, i, o) = (x.dim(0), self.input_width(), self.output_width());
        let mut y = Tensor::zeros(&[b, o]);
        for n in 0..b {
            y.outer_mut(n).copy_from_slice(self.bias.value.data());
        }
        gemm(
            Trans::No,
            Trans::Yes,
            b,
            i,
            o,
            T::one(),
            x.data(),
            self.weight.value.data(),
            T::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(saved_input)?;
        let (b, i, o) = (saved_input.dim(0), self.input_width(), self.output_width());
        grad_out.ensure_shape("linear backward", &[b, o])?;
        gemm(
            Trans::Yes,
            Trans::No,
            o,
            b,
            i,
            T::one(),
            grad_out.data(),
            saved_input.data(),
            T::one(),
            self.weight.grad.data_mut(),
        );
        for n in 0..b {
            for (db, &g) in self.bias.grad.data_mut().iter_mut().zip(grad_out.outer(n)) {
                *db += g;
            }
        }
        let mut grad_in = Tensor::zeros(&[b, i]);
        gemm(
            Trans::No,
            Trans::No,
            b,
            o,
            i,
            T::one(),
            grad_out.data(),
            self.weight.value.data(),
            T::zero(),
            grad_in.data_mut(),
        );
        Ok(grad_in)
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Two-layer projection head: linear, rectifier, linear. Output is not
/// normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T = f32> {
    input: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> MlpHead<T> {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        MlpHead {
            fc1: Linear::new(input, hidden, rng),
            fc2: Linear::new(hidden, output, rng),
        }
    }

    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }

    pub fn input_width(&self) -> usize {
        self.fc1.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.fc2.output_width()
    }

    pub fn forward(&self, v: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let hidden = relu(&self.fc1.forward(v)?);
        let out = self.fc2.forward(&hidden)?;
        Ok((
            out,
            MlpCache {
                input: v.clone(),
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, cache: &MlpCache<T>) -> Result<Tensor<T>> {
        let g_hidden = self.fc2.backward(grad_out, &cache.hidden)?;
        let g_pre = relu_backward(&g_hidden, &cache.hidden)?;
        self.fc1.backward(&g_pre, &cache.input)
    }

    pub fn cast<U: Scalar>(&self) -> MlpHead<U> {
        MlpHead {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for MlpHead<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = prefixed("fc1", self.fc1.params());
        out.extend(prefixed("fc2", self.fc2.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = prefixed("fc1", self.fc1.params_mut());
        out.extend(prefixed("fc2", self.fc2.params_mut()));
        out
    }
}
