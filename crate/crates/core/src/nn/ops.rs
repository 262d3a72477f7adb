use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Rows with a norm at or below this are rejected by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a rectifier given its saved output.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, saved_output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_with(
        "relu backward",
        saved_output,
        |g, y| {
            if y > T::zero() {
                g
            } else {
                T::zero()
            }
        },
    )
}

fn rows<T: Scalar>(v: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if v.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: format!("{op} expects [B, D]"),
        });
    }
    Ok((v.dim(0), v.dim(1)))
}

/// Projects every row of `[B, D]` onto the unit sphere.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, _) = rows(v, "l2_normalize")?;
    let mut out = v.clone();
    for n in 0..b {
        let row = out.outer_mut(n);
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm.as_f64() <= NORM_EPS {
            return Err(Error::Degenerate(format!(
                "row {n} has norm {:e}, cannot normalize",
                norm.as_f64()
            )));
        }
        row.iter_mut().for_each(|x| *x = *x / norm);
    }
    Ok(out)
}

/// `dx = (g − y·(y·g)) / ‖x‖` for `y = x / ‖x‖`.
pub fn l2_normalize_backward<T: Scalar>(grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, _) = rows(saved_input, "l2_normalize backward")?;
    grad_out.ensure_same_shape("l2_normalize backward", saved_input)?;
    let mut out = Tensor::zeros(saved_input.shape());
    for n in 0..b {
        let x = saved_input.outer(n);
        let g = grad_out.outer(n);
        let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        let yg = x.iter().zip(g).map(|(&xi, &gi)| xi * gi).sum::<T>() / norm;
        for ((d, &xi), &gi) in out.outer_mut(n).iter_mut().zip(x).zip(g) {
            *d = (gi - xi / norm * yg) / norm;
        }
    }
    Ok(out)
}

/// Output of the parameter-free per-channel standardization.
#[derive(Debug, Clone)]
pub struct Standardized<T = f32> {
    pub output: Tensor<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel).
    pub inv_std: Vec<T>,
}

const STD_EPS: f64 = 1e-5;

/// Standardizes each `(sample, channel)` plane of a `[B, C, H, W]` map to zero
/// mean and unit variance.
pub fn standardize_channels<T: Scalar>(x: &Tensor<T>) -> Result<Standardized<T>> {
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "standardize expects [B, C, H, W]".into(),
        });
    }
    let hw = x.dim(2) * x.dim(3);
    let planes = x.dim(0) * x.dim(1);
    let mut output = x.clone();
    let mut inv_std = Vec::with_capacity(planes);
    let n = T::from_f64(hw as f64);
    for plane in output.data_mut().chunks_mut(hw) {
        let mean = plane.iter().copied().sum::<T>() / n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::from_f64(STD_EPS)).sqrt();
        plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    Ok(Standardized { output, inv_std })
}

pub fn standardize_channels_backward<T: Scalar>(grad_out: &Tensor<T>, saved: &Standardized<T>) -> Result<Tensor<T>> {
    grad_out.ensure_same_shape("standardize backward", &saved.output)?;
    let hw = grad_out.dim(2) * grad_out.dim(3);
    let n = T::from_f64(hw as f64);
    let mut out = grad_out.clone();
    for ((g, y), &inv) in out
        .data_mut()
        .chunks_mut(hw)
        .zip(saved.output.data().chunks(hw))
        .zip(&saved.inv_std)
    {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
        for (gi, &yi) in g.iter_mut().zip(y) {
            *gi = inv * (*gi - mean_g - yi * mean_gy);
        }
    }
    Ok(out)
}

/// `[B, C, H, W] -> [B, C]`
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "global_avg_pool expects [B, C, H, W]".into(),
        });
    }
    let hw = x.dim(2) * x.dim(3);
    let n = T::from_f64(hw as f64);
    let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() / n).collect();
    Tensor::from_vec(&[x.dim(0), x.dim(1)], data)
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    grad_out.ensure_shape("global_avg_pool backward", &input_shape[..2])?;
    let hw = input_shape[2] * input_shape[3];
    let scale = T::one() / T::from_f64(hw as f64);
    let mut out = Tensor::zeros(input_shape);
    for (plane, &g) in out.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        plane.fill(g * scale);
    }
    Ok(out)
}

/// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    for (dst, src) in out.data_mut().chunks_mut(4 * h * w).zip(x.data().chunks(h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, h2, w2) = (grad_out.dim(0), grad_out.dim(1), grad_out.dim(2), grad_out.dim(3));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(h2 * w2)) {
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    out
}

/// Non-overlapping `k×k` max pooling. Returns the output and the flat input
/// index of every selected element.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 4 || k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("max_pool2d with window {k}"),
        });
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / k, w / k);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = Vec::with_capacity(out.len());
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = p * h * w + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = p * h * w + (oy * k + dy) * w + ox * k + dx;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.data_mut()[(p * ho + oy) * wo + ox] = x.data()[best];
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::MissingActivation(format!(
            "max_pool2d saved {} indices for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut out = Tensor::zeros(input_shape);
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        out.data_mut()[i] += g;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_difference, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn normalize_three_four_five() {
        let v = Tensor::<f64>::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let y = l2_normalize(&v).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_rows() {
        let v = Tensor::<f64>::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&v).unwrap(), v);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let v = Tensor::<f32>::zeros(&[2, 4]);
        assert!(matches!(l2_normalize(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_rows_have_unit_norm() {
        let v = random(&[16, 9], 1);
        let y = l2_normalize(&v.cast::<f32>()).unwrap();
        for n in 0..16 {
            let norm: f32 = y.outer(n).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let x = random(&[3, 5], 2);
        let g = random(&[3, 5], 3);
        let analytic = l2_normalize_backward(&g, &x).unwrap();
        let fd = finite_difference(&x, 1e-6, |x| l2_normalize(x).unwrap().dot(&g).unwrap());
        assert!(max_rel_error(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let x = random(&[4, 7], 4);
        let g = random(&[4, 7], 5);
        let analytic = relu_backward(&g, &relu(&x)).unwrap();
        let fd = finite_difference(&x, 1e-6, |x| relu(x).dot(&g).unwrap());
        assert!(max_rel_error(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn standardize_gradient_matches_finite_differences() {
        let x = random(&[2, 3, 4, 4], 6);
        let g = random(&[2, 3, 4, 4], 7);
        let saved = standardize_channels(&x).unwrap();
        let analytic = standardize_channels_backward(&g, &saved).unwrap();
        let fd = finite_difference(&x, 1e-6, |x| standardize_channels(x).unwrap().output.dot(&g).unwrap());
        assert!(max_rel_error(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn pooling_and_upsampling_adjoints() {
        let x = random(&[2, 3, 4, 6], 8);
        let g = random(&[2, 3], 9);
        let lhs = global_avg_pool(&x).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&global_avg_pool_backward(&g, x.shape()).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        let gu = random(&[2, 3, 8, 12], 10);
        let lhs = upsample_nearest2x(&x).dot(&gu).unwrap();
        let rhs = x.dot(&upsample_nearest2x_backward(&gu)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let (y, arg) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.9]);
        let gx = max_pool2d_backward(&Tensor::full(&[1, 1, 1, 1], 2.0), &arg, x.shape()).unwrap();
        assert_eq!(gx.data(), &[0.0, 2.0, 0.0, 0.0]);
        assert!(max_pool2d_backward(&Tensor::full(&[1, 1, 1, 1], 2.0), &[], x.shape()).is_err());
    }
}
