//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uglyduck_core::image::RgbImage;
use uglyduck_core::tiling::BoundingBox;

/// `n` overlapping boxes scattered over a 1640×1116 frame.
pub fn random_boxes(n: usize, seed: u64) -> Vec<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..1600.0), rng.random_range(0.0..1080.0));
            let s = rng.random_range(8.0..60.0);
            BoundingBox::new(x, y, x + s, y + s, rng.random_range(0.0..1.0))
        })
        .collect()
}

/// Noisy skin-toned crops of side `size`.
pub fn random_crops(n: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| RgbImage::from_fn(size, size, |_, _| [rng.random_range(150..220), rng.random_range(110..170), rng.random_range(90..140)]))
        .collect()
}
