//! Paired crop/mask augmentation: quarter-turn rotations, flips, shifted
//! crops with reflect padding, and color jitter on the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{reflect_index, Plane, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotations: bool,
    pub flips: bool,
    pub crops: bool,
    pub color_jitter: bool,
    /// Largest crop offset in pixels.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotations: true, flips: true, crops: true, color_jitter: true, max_shift: 6 }
    }
}

/// Geometric part of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Geometry {
    pub quarter_turns: u8,
    pub flip: bool,
    pub shift: (isize, isize),
}

impl Geometry {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let s = cfg.max_shift as i64;
        Self {
            quarter_turns: if cfg.rotations { rng.random_range(0..4) } else { 0 },
            flip: cfg.flips && rng.random_bool(0.5),
            shift: if cfg.crops && s > 0 { (rng.random_range(-s..=s) as isize, rng.random_range(-s..=s) as isize) } else { (0, 0) },
        }
    }

    /// Source pixel for output `(x, y)` in a square of side `n`.
    fn source(&self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        let (mut u, mut v) = (x, y);
        if self.flip {
            u = m - u;
        }
        for _ in 0..self.quarter_turns {
            (u, v) = (v, m - u);
        }
        let su = reflect_index(u as isize + self.shift.0, n);
        let sv = reflect_index(v as isize + self.shift.1, n);
        (su, sv)
    }

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        let n = img.width;
        RgbImage::from_fn(n, n, |x, y| {
            let (sx, sy) = self.source(x, y, n);
            img.get(sx, sy)
        })
    }

    pub fn apply_plane<T: Copy + Default>(&self, p: &Plane<T>) -> Plane<T> {
        let n = p.width;
        let mut out = Plane::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = self.source(x, y, n);
                out.set(x, y, p.get(sx, sy));
            }
        }
        out
    }
}

fn jitter(img: &mut RgbImage, rng: &mut impl Rng) {
    let brightness: f32 = rng.random_range(-20.0..20.0);
    let contrast: f32 = rng.random_range(0.85..1.15);
    let gains: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(0.92..1.08));
    for px in img.data.chunks_exact_mut(3) {
        for c in 0..3 {
            let v = (px[c] as f32 - 128.0) * contrast * gains[c] + 128.0 + brightness;
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Identically transformed `(crop, mask)`; inputs must be square.
pub fn augment_pair(img: &RgbImage, mask: &Plane<u8>, cfg: &AugmentConfig, rng: &mut impl Rng) -> (RgbImage, Plane<u8>) {
    let g = Geometry::sample(cfg, rng);
    let mut out = g.apply_image(img);
    if cfg.color_jitter {
        jitter(&mut out, rng);
    }
    (out, g.apply_plane(mask))
}
