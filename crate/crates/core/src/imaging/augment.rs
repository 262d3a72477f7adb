use rand::Rng;

use super::{resample_region, Image};
use crate::error::{Error, Result};

/// Random view augmentation: resized crop, color jitter, grayscale, blur,
/// horizontal flip.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Output side length of every view.
    pub view_size: usize,
    /// Crop area as a fraction of the source area.
    pub crop_area: (f64, f64),
    /// Crop `w / h`, sampled log-uniformly.
    pub crop_aspect: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub flip_p: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            view_size: 64,
            crop_area: (0.2, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            flip_p: 0.5,
        }
    }
}

impl AugmentParams {
    /// Every random operation disabled; the view is a plain resize.
    pub fn identity(view_size: usize) -> Self {
        AugmentParams {
            view_size,
            crop_area: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 0.1),
            flip_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        let ok = self.view_size > 0
            && prob(self.grayscale_p)
            && prob(self.blur_p)
            && prob(self.flip_p)
            && range(self.crop_area)
            && self.crop_area.1 <= 1.0
            && range(self.crop_aspect)
            && range(self.blur_sigma)
            && [self.brightness, self.contrast, self.saturation]
                .iter()
                .all(|&s| (0.0..1.0).contains(&s));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("augment params {self:?}")))
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    uniform(rng, (lo.ln(), hi.ln())).exp()
}

/// `(x, y, w, h)` of a random crop with the requested area and aspect;
/// falls back to the central full-size crop after ten rejected draws.
fn sample_crop<R: Rng>(img: &Image, p: &AugmentParams, rng: &mut R) -> (f64, f64, f64, f64) {
    let (iw, ih) = (img.width() as f64, img.height() as f64);
    for _ in 0..10 {
        let area = iw * ih * uniform(rng, p.crop_area);
        let ratio = log_uniform(rng, p.crop_aspect);
        let w = (area * ratio).sqrt().round();
        let h = (area / ratio).sqrt().round();
        if w >= 1.0 && h >= 1.0 && w <= iw && h <= ih {
            let x = if w < iw {
                rng.gen_range(0..=(iw - w) as usize) as f64
            } else {
                0.0
            };
            let y = if h < ih {
                rng.gen_range(0..=(ih - h) as usize) as f64
            } else {
                0.0
            };
            return (x, y, w, h);
        }
    }
    (0.0, 0.0, iw, ih)
}

fn luma(rgb: &[f32]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn adjust_brightness(img: &mut Image, factor: f32) {
    img.pixels_mut().iter_mut().for_each(|v| *v *= factor);
    img.clamp();
}

fn adjust_contrast(img: &mut Image, factor: f32) {
    let n = (img.height() * img.width()) as f32;
    let mean = img.pixels().chunks(3).map(luma).sum::<f32>() / n;
    img.pixels_mut()
        .iter_mut()
        .for_each(|v| *v = mean + (*v - mean) * factor);
    img.clamp();
}

fn adjust_saturation(img: &mut Image, factor: f32) {
    for px in img.pixels_mut().chunks_mut(3) {
        let g = luma(px);
        px.iter_mut().for_each(|v| *v = g + (*v - g) * factor);
    }
    img.clamp();
}

fn to_grayscale(img: &mut Image) {
    for px in img.pixels_mut().chunks_mut(3) {
        let g = luma(px);
        px.fill(g);
    }
}

/// Separable Gaussian blur with radius `ceil(3σ)` and edge replication.
/// Accumulates in `f64` so constant images stay exactly constant.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::new(src.height(), src.width());
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                for (k, &kw) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y, (x + d).clamp(0, w - 1))
                    } else {
                        ((y + d).clamp(0, h - 1), x)
                    };
                    let p = src.get(sy as usize, sx as usize);
                    for c in 0..3 {
                        acc[c] += kw * p[c] as f64;
                    }
                }
                out.set(y as usize, x as usize, acc.map(|v| v as f32));
            }
        }
        out
    };
    let mut out = pass(&pass(img, true), false);
    out.clamp();
    out
}

/// Random view of `img`, always `view_size × view_size` with values in `[0, 1]`.
pub fn augment_view<R: Rng>(img: &Image, p: &AugmentParams, rng: &mut R) -> Image {
    let (x, y, w, h) = sample_crop(img, p, rng);
    let mut view = resample_region(img, x, y, w, h, p.view_size, p.view_size);

    // Color jitter: each enabled statistic gets a factor from [1 - s, 1 + s].
    if p.brightness > 0.0 {
        let f = uniform(rng, (1.0 - p.brightness, 1.0 + p.brightness));
        adjust_brightness(&mut view, f as f32);
    }
    if p.contrast > 0.0 {
        let f = uniform(rng, (1.0 - p.contrast, 1.0 + p.contrast));
        adjust_contrast(&mut view, f as f32);
    }
    if p.saturation > 0.0 {
        let f = uniform(rng, (1.0 - p.saturation, 1.0 + p.saturation));
        adjust_saturation(&mut view, f as f32);
    }
    if p.grayscale_p > 0.0 && rng.gen_bool(p.grayscale_p) {
        to_grayscale(&mut view);
    }
    if p.blur_p > 0.0 && rng.gen_bool(p.blur_p) {
        let sigma = uniform(rng, p.blur_sigma);
        view = gaussian_blur(&view, sigma);
    }
    if p.flip_p > 0.0 && rng.gen_bool(p.flip_p) {
        view = view.flip_horizontal();
    }
    view.clamp();
    view
}
