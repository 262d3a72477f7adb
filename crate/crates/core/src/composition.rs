//! Copy-paste composition: a randomly scaled foreground view pasted onto a
//! different gallery image, returning the composite and the pasted box.

use rand::Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::imaging::{augment_view, resample_region, AugmentParams, Gallery, Image};
use crate::nn::Variant;

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionParams {
    /// Side of the square composite.
    pub composite_size: usize,
    /// Foreground shorter side in pixels.
    pub scale: (f64, f64),
    /// Foreground `w / h`, sampled log-uniformly.
    pub aspect: (f64, f64),
    pub mode: Variant,
}

impl CompositionParams {
    /// Desk-scale defaults; the aspect range depends on the architecture.
    pub fn for_variant(mode: Variant) -> Self {
        let aspect = match mode {
            Variant::C4 => (1.0 / 3.0, 3.0),
            Variant::Fpn => (0.5, 2.0),
        };
        CompositionParams {
            composite_size: 64,
            scale: (16.0, 48.0),
            aspect,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        let (alo, ahi) = self.aspect;
        if self.composite_size == 0 || !(lo > 0.0 && lo <= hi && hi <= self.composite_size as f64) {
            return Err(Error::InvalidArgument(format!(
                "foreground scale range {:?} must lie in (0, {}]",
                self.scale, self.composite_size
            )));
        }
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(Error::InvalidArgument(format!("aspect range {:?}", self.aspect)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: Image,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub image: Image,
    pub bbox: BBox,
    pub instance_id: usize,
    pub background_id: usize,
}

/// Background resized and centre-cropped to a square of `size`.
fn prepare_background(bg: &Image, size: usize) -> Image {
    if bg.height() == size && bg.width() == size {
        return bg.clone();
    }
    let side = bg.height().min(bg.width()) as f64;
    let x0 = (bg.width() as f64 - side) / 2.0;
    let y0 = (bg.height() as f64 - side) / 2.0;
    resample_region(bg, x0, y0, side, side, size, size)
}

/// Integer foreground size `(h, w)` for one draw.
fn sample_size<R: Rng>(params: &CompositionParams, rng: &mut R) -> Result<(usize, usize)> {
    let size = params.composite_size;
    let (lo, hi) = params.scale;
    let min_short = lo.ceil() as usize;
    let max_short = (hi.floor() as usize).min(size);
    if min_short == 0 || min_short > max_short {
        return Err(Error::InvalidArgument(format!(
            "no integer foreground size in scale range {:?} fits a {size}px composite",
            params.scale
        )));
    }
    let short = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let (alo, ahi) = params.aspect;
    let ratio = if alo < ahi {
        rng.gen_range(alo.ln()..ahi.ln()).exp()
    } else {
        alo
    };
    let short_px = (short.round() as usize).clamp(min_short, max_short);
    let long_ratio = if ratio >= 1.0 { ratio } else { 1.0 / ratio };
    let long_px = ((short_px as f64 * long_ratio).round() as usize).clamp(short_px, size);
    Ok(if ratio >= 1.0 {
        (short_px, long_px)
    } else {
        (long_px, short_px)
    })
}

/// Pastes `fg_view`, resized to a random scale and aspect, at a uniformly
/// random position fully inside the composite. Pixels outside the returned
/// box are exactly the background.
pub fn compose<R: Rng>(fg_view: &Image, bg: &Image, params: &CompositionParams, rng: &mut R) -> Result<Composite> {
    params.validate()?;
    let size = params.composite_size;
    let mut image = prepare_background(bg, size);
    let (h, w) = sample_size(params, rng)?;
    let fg = resample_region(fg_view, 0.0, 0.0, fg_view.width() as f64, fg_view.height() as f64, h, w);
    let x0 = rng.gen_range(0..=size - w);
    let y0 = rng.gen_range(0..=size - h);
    image.paste(&fg, y0, x0);
    let bbox = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)?;
    Ok(Composite { image, bbox })
}

/// Query and key composites of one instance over two distinct backgrounds,
/// each different from the instance itself.
pub fn make_pair<R: Rng>(
    gallery: &Gallery,
    instance_id: usize,
    aug: &AugmentParams,
    params: &CompositionParams,
    rng: &mut R,
) -> Result<(CompositeSample, CompositeSample)> {
    let k = gallery.len();
    if k < 3 {
        return Err(Error::InvalidArgument(format!(
            "make_pair needs an instance and two backgrounds, gallery has {k}"
        )));
    }
    let fg = gallery.get(instance_id)?;
    // Uniform over ids != instance_id, then uniform over ids != both.
    let skip = |mut id: usize, excluded: &mut [usize]| {
        excluded.sort_unstable();
        for &e in excluded.iter() {
            if id >= e {
                id += 1;
            }
        }
        id
    };
    let bg_q = skip(rng.gen_range(0..k - 1), &mut [instance_id]);
    let bg_k = skip(rng.gen_range(0..k - 2), &mut [instance_id, bg_q]);

    let sample = |bg_id: usize, rng: &mut R| -> Result<CompositeSample> {
        let view = augment_view(fg, aug, rng);
        let c = compose(&view, &gallery.images[bg_id], params, rng)?;
        Ok(CompositeSample {
            image: c.image,
            bbox: c.bbox,
            instance_id,
            background_id: bg_id,
        })
    };
    let query = sample(bg_q, rng)?;
    let key = sample(bg_k, rng)?;
    Ok((query, key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_gallery, resize_bilinear};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fg() -> Image {
        let px = (0..40 * 40 * 3).map(|i| ((i * 31) % 97) as f32 / 96.0).collect();
        Image::from_pixels(40, 40, px).unwrap()
    }

    #[test]
    fn full_cover_case_equals_resized_foreground() {
        let params = CompositionParams {
            scale: (64.0, 64.0),
            aspect: (1.0, 1.0),
            ..CompositionParams::for_variant(Variant::C4)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = compose(&fg(), &Image::filled(64, 64, [0.5; 3]), &params, &mut rng).unwrap();
        assert_eq!(c.bbox, BBox::full(64, 64));
        assert_eq!(c.image, resize_bilinear(&fg(), 64, 64));
    }

    #[test]
    fn outside_box_is_background_and_inside_is_foreground() {
        let bg = Image::filled(64, 64, [0.1, 0.2, 0.3]);
        let params = CompositionParams::for_variant(Variant::C4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = compose(&fg(), &bg, &params, &mut rng).unwrap();
            let b = c.bbox;
            assert!(b.is_inside(64, 64));
            let short = b.width().min(b.height());
            assert!((16.0..=48.0).contains(&short), "{b:?}");
            let fg_resized = resize_bilinear(&fg(), b.height() as usize, b.width() as usize);
            for y in 0..64 {
                for x in 0..64 {
                    let inside = (x as f64) >= b.x1 && (x as f64) < b.x2 && (y as f64) >= b.y1 && (y as f64) < b.y2;
                    let want = if inside {
                        fg_resized.get(y - b.y1 as usize, x - b.x1 as usize)
                    } else {
                        bg.get(y, x)
                    };
                    assert_eq!(c.image.get(y, x), want);
                }
            }
        }
    }

    #[test]
    fn compose_is_deterministic() {
        let params = CompositionParams::for_variant(Variant::Fpn);
        let bg = Image::filled(64, 64, [0.4; 3]);
        let a = compose(&fg(), &bg, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = compose(&fg(), &bg, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_scale_is_rejected() {
        let params = CompositionParams {
            scale: (16.0, 80.0),
            ..CompositionParams::for_variant(Variant::C4)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(compose(&fg(), &Image::new(64, 64), &params, &mut rng).is_err());
        let params = CompositionParams {
            scale: (16.2, 16.8),
            ..CompositionParams::for_variant(Variant::C4)
        };
        assert!(compose(&fg(), &Image::new(64, 64), &params, &mut rng).is_err());
    }

    #[test]
    fn larger_background_is_resized_to_composite() {
        let params = CompositionParams::for_variant(Variant::C4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = compose(&fg(), &Image::filled(100, 80, [0.2; 3]), &params, &mut rng).unwrap();
        assert_eq!((c.image.height(), c.image.width()), (64, 64));
    }

    #[test]
    fn pair_uses_distinct_backgrounds() {
        let gallery = generate_gallery(5, 32, 0).unwrap();
        let params = CompositionParams {
            composite_size: 32,
            scale: (8.0, 24.0),
            ..CompositionParams::for_variant(Variant::C4)
        };
        let aug = AugmentParams {
            view_size: 32,
            ..AugmentParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in 0..5 {
            let (q, k) = make_pair(&gallery, id, &aug, &params, &mut rng).unwrap();
            assert_eq!((q.instance_id, k.instance_id), (id, id));
            assert_ne!(q.background_id, id);
            assert_ne!(k.background_id, id);
            assert_ne!(q.background_id, k.background_id);
        }
        let small = generate_gallery(2, 32, 0).unwrap();
        assert!(make_pair(&small, 0, &aug, &params, &mut rng).is_err());
    }
}
