//! RGB rasters, the procedural instance gallery, view augmentation and PPM I/O.

mod augment;
mod gallery;
mod ppm;

pub use augment::{augment_view, gaussian_blur, AugmentParams};
pub use gallery::{generate_gallery, Gallery};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel normalization applied when images enter a network.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// Row-major `H×W×3` raster with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Image { height, width, pixels }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidShape {
                shape: vec![height, width, 3],
                reason: format!("holds {} values", pixels.len()),
            });
        }
        Ok(Image { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        let total: f32 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum();
        total / self.pixels.len() as f32
    }

    /// Copy of `src` written with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Image, y0: usize, x0: usize) {
        for y in 0..src.height {
            let dst = ((y0 + y) * self.width + x0) * 3;
            let row = y * src.width * 3;
            self.pixels[dst..dst + src.width * 3].copy_from_slice(&src.pixels[row..row + src.width * 3]);
        }
    }

    /// Planar `[3, H, W]` copy, normalized with [`PIXEL_MEAN`] and [`PIXEL_STD`].
    pub fn to_chw<T: Scalar>(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, rgb) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = T::from_f64(((rgb[c] - PIXEL_MEAN) / PIXEL_STD) as f64);
            }
        }
        out
    }

    /// One-pixel-wide rectangle outline, used for inspection dumps.
    pub fn draw_rect(&mut self, x1: usize, y1: usize, x2: usize, y2: usize, rgb: [f32; 3]) {
        let (x2, y2) = (x2.min(self.width), y2.min(self.height));
        if x1 >= x2 || y1 >= y2 {
            return;
        }
        for x in x1..x2 {
            self.set(y1, x, rgb);
            self.set(y2 - 1, x, rgb);
        }
        for y in y1..y2 {
            self.set(y, x1, rgb);
            self.set(y, x2 - 1, rgb);
        }
    }
}

/// Stacks equally sized images into a normalized `[B, 3, H, W]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape("image batch", &[h, w], &[img.height, img.width]));
        }
        data.extend(img.to_chw::<T>());
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Half-pixel-aligned bilinear resampling of the whole image.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    resample_region(img, 0.0, 0.0, img.width as f64, img.height as f64, out_h, out_w)
}

/// Bilinear resampling of the region `[x0, x0+w) × [y0, y0+h)` to
/// `out_h × out_w`, clamping reads to the image edge.
pub fn resample_region(img: &Image, x0: f64, y0: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> Image {
    let (out_h, out_w) = (out_h.max(1), out_w.max(1));
    let sy = h / out_h as f64;
    let sx = w / out_w as f64;
    let axis = |o: usize, scale: f64, start: f64, len: usize| {
        let s = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|ox| axis(ox, sx, x0, img.width)).collect();
    let mut out = Image::new(out_h, out_w);
    for oy in 0..out_h {
        let (y0i, y1i, fy) = axis(oy, sy, y0, img.height);
        for (ox, &(x0i, x1i, fx)) in cols.iter().enumerate() {
            let mut rgb = [0.0f32; 3];
            let (a, b, c, d) = (
                img.get(y0i, x0i),
                img.get(y0i, x1i),
                img.get(y1i, x0i),
                img.get(y1i, x1i),
            );
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                rgb[ch] = top + (bottom - top) * fy;
            }
            out.set(oy, ox, rgb);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker() -> Image {
        let mut img = Image::new(2, 2);
        img.set(0, 1, [1.0; 3]);
        img.set(1, 0, [1.0; 3]);
        img
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = Image::from_pixels(3, 5, (0..45).map(|i| (i as f32 * 0.37).fract()).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 5), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(7, 5, [0.25, 0.5, 0.75]);
        let out = resize_bilinear(&img, 13, 3);
        assert!(out.pixels().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
    }

    #[test]
    fn checkerboard_upscale_matches_hand_evaluation() {
        // Source coordinates for 2 -> 4 are (o + 0.5) / 2 - 0.5, clamped:
        // 0, 0.25, 0.75, 1 -> fractional weights 0, 0.25, 0.75, 1 toward index 1.
        let f = [0.0f32, 0.25, 0.75, 1.0];
        let out = resize_bilinear(&checker(), 4, 4);
        for oy in 0..4 {
            for ox in 0..4 {
                let (fy, fx) = (f[oy], f[ox]);
                // v00 = 0, v01 = 1, v10 = 1, v11 = 0
                let want = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((out.get(oy, ox)[0] - want).abs() < 1e-6, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn chw_layout_and_normalization() {
        let mut img = Image::new(1, 2);
        img.set(0, 1, [1.0, 0.5, 0.0]);
        let t = images_to_tensor::<f32>(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[-2.0, 2.0, -2.0, 0.0, -2.0, -2.0]);
    }
}
