use rand::Rng;

use super::{fan_in_uniform, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation over `[B, C, H, W]` tensors, computed per sample as
/// an im2col product.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        Self::from_weights(weight, Tensor::zeros(&[out_channels]), stride, pad).expect("consistent shapes")
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 4 || s[2] != s[3] || bias.shape() != [s[0]] || stride == 0 {
            return Err(Error::shape("conv2d weights", &s, bias.shape()));
        }
        Ok(Conv2d {
            in_channels: s[1],
            out_channels: s[0],
            kernel: s[2],
            stride,
            pad,
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: self.weight.value.shape().to_vec(),
        };
        if input.len() != 4 || input[1] != self.in_channels {
            return Err(bad());
        }
        let ho = conv_output_size(input[2], self.kernel, self.stride, self.pad).ok_or_else(bad)?;
        let wo = conv_output_size(input[3], self.kernel, self.stride, self.pad).ok_or_else(bad)?;
        Ok(vec![input[0], self.out_channels, ho, wo])
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let k = self.kernel;
        let hw = ho * wo;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let k = self.kernel;
        let hw = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(input.shape())?;
        let (b, h, w) = (input.dim(0), input.dim(2), input.dim(3));
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&out_shape);
        let mut cols = vec![T::zero(); if self.is_pointwise() { 0 } else { ckk * ho * wo }];
        for n in 0..b {
            let x = input.outer(n);
            let src: &[T] = if self.is_pointwise() {
                x
            } else {
                self.im2col(x, h, w, ho, wo, &mut cols);
                &cols
            };
            let y = out.outer_mut(n);
            for (o, &bias) in self.bias.value.data().iter().enumerate() {
                y[o * ho * wo..(o + 1) * ho * wo].fill(bias);
            }
            gemm(
                Trans::No,
                Trans::No,
                self.out_channels,
                ckk,
                ho * wo,
                T::one(),
                self.weight.value.data(),
                src,
                T::one(),
                y,
            );
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_impl(grad_out, saved_input, true)
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn backward_input(&self, grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Result<Tensor<T>> {
        // The clone is cheap relative to the products and keeps a single code path.
        let mut scratch = self.clone();
        scratch.backward_impl(grad_out, saved_input, false)
    }

    fn backward_impl(&mut self, grad_out: &Tensor<T>, saved_input: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(saved_input.shape())?;
        grad_out.ensure_shape("conv2d backward", &out_shape)?;
        let (b, h, w) = (saved_input.dim(0), saved_input.dim(2), saved_input.dim(3));
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let hw = ho * wo;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let mut grad_in = Tensor::zeros(saved_input.shape());
        let mut cols = vec![T::zero(); ckk * hw];
        let mut dcols = vec![T::zero(); ckk * hw];
        for n in 0..b {
            let g = grad_out.outer(n);
            if accumulate {
                let x = saved_input.outer(n);
                let src: &[T] = if pointwise {
                    x
                } else {
                    self.im2col(x, h, w, ho, wo, &mut cols);
                    &cols
                };
                gemm(
                    Trans::No,
                    Trans::Yes,
                    self.out_channels,
                    hw,
                    ckk,
                    T::one(),
                    g,
                    src,
                    T::one(),
                    self.weight.grad.data_mut(),
                );
                for (o, db) in self.bias.grad.data_mut().iter_mut().enumerate() {
                    *db += g[o * hw..(o + 1) * hw].iter().copied().sum();
                }
            }
            let dst: &mut [T] = if pointwise { grad_in.outer_mut(n) } else { &mut dcols };
            gemm(
                Trans::Yes,
                Trans::No,
                ckk,
                self.out_channels,
                hw,
                T::one(),
                self.weight.value.data(),
                g,
                T::zero(),
                dst,
            );
            if !pointwise {
                self.col2im(&dcols, h, w, ho, wo, grad_in.outer_mut(n));
            }
        }
        Ok(grad_in)
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}
