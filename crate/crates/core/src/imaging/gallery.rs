use rand::Rng;

use super::Image;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Procedurally generated instance set; instance `i` is image `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub images: Vec<Image>,
    pub seed: u64,
}

impl Gallery {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn instance_ids(&self) -> std::ops::Range<usize> {
        0..self.images.len()
    }

    pub fn get(&self, id: usize) -> Result<&Image> {
        self.images
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("instance {id} not in gallery of {}", self.len())))
    }
}

type Rgb = [f32; 3];

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn blend(dst: &mut Rgb, src: Rgb, alpha: f32) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

/// Point-in-convex-polygon test, vertices in counter-clockwise order.
fn inside_polygon(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
    (0..poly.len()).all(|i| {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
    })
}

fn render_instance<R: Rng>(size: usize, rng: &mut R) -> Image {
    let s = size as f32;
    let palette: Vec<Rgb> = (0..4).map(|_| random_color(rng)).collect();

    // Background gradient along a random direction.
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    // Oriented stripes.
    let phi: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let freq: f32 = rng.gen_range(2.0..7.0) * std::f32::consts::TAU / s;
    let (sx, sy) = (phi.cos(), phi.sin());
    let stripe_alpha: f32 = rng.gen_range(0.3..0.7);
    // Soft blobs.
    let blobs: Vec<(f32, f32, f32, Rgb)> = (0..rng.gen_range(2..5))
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(0.08..0.25) * s,
                palette[rng.gen_range(0..palette.len())],
            )
        })
        .collect();
    // Convex polygons: a random triangle or quad around a centre.
    let polygons: Vec<(Vec<(f32, f32)>, Rgb)> = (0..rng.gen_range(1..4))
        .map(|_| {
            let (cx, cy) = (rng.gen_range(0.15..0.85) * s, rng.gen_range(0.15..0.85) * s);
            let radius = rng.gen_range(0.1..0.3) * s;
            let sides = rng.gen_range(3..5);
            let start: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let verts = (0..sides)
                .map(|k| {
                    let a = start + k as f32 * std::f32::consts::TAU / sides as f32;
                    (cx + radius * a.cos(), cy + radius * a.sin())
                })
                .collect();
            (verts, random_color(rng))
        })
        .collect();

    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = (((fx - s / 2.0) * gx + (fy - s / 2.0) * gy) / s + 0.5).clamp(0.0, 1.0);
            let mut rgb = palette[0];
            blend(&mut rgb, palette[1], t);
            let wave = 0.5 + 0.5 * ((fx * sx + fy * sy) * freq).sin();
            blend(&mut rgb, palette[2], stripe_alpha * wave);
            for &(bx, by, r, color) in &blobs {
                let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                blend(&mut rgb, color, (-d2 / (2.0 * r * r)).exp() * 0.8);
            }
            for (poly, color) in &polygons {
                if inside_polygon(poly, fx, fy) {
                    rgb = *color;
                }
            }
            img.set(y, x, rgb.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    img
}

/// `count` procedural `size×size` instances, deterministic in `seed`.
pub fn generate_gallery(count: usize, size: usize, seed: u64) -> Result<Gallery> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "gallery needs at least 2 instances, got {count}"
        )));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("gallery image size must be positive".into()));
    }
    let images = (0..count)
        .map(|i| render_instance(size, &mut stream(seed, "gallery", i as u64)))
        .collect();
    Ok(Gallery { images, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        assert_eq!(generate_gallery(4, 64, 7).unwrap(), generate_gallery(4, 64, 7).unwrap());
        assert_ne!(generate_gallery(4, 64, 7).unwrap(), generate_gallery(4, 64, 8).unwrap());
    }

    #[test]
    fn instances_are_distinct() {
        let g = generate_gallery(16, 32, 1).unwrap();
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                let d: f32 = g.images[i]
                    .pixels()
                    .iter()
                    .zip(g.images[j].pixels())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f32>()
                    / g.images[i].pixels().len() as f32;
                assert!(d > 0.0, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn footprint_and_range() {
        let g = generate_gallery(256, 64, 3).unwrap();
        let floats: usize = g.images.iter().map(|i| i.pixels().len()).sum();
        assert_eq!(floats, 256 * 64 * 64 * 3);
        assert!(g
            .images
            .iter()
            .all(|i| i.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(g.instance_ids(), 0..256);
    }

    #[test]
    fn too_small_gallery_is_rejected() {
        assert!(generate_gallery(1, 64, 0).is_err());
    }
}
