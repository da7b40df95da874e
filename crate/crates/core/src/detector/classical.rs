//! Deterministic blob detector: multi-scale center-surround darkness contrast,
//! thresholding and connected components.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdError};
use crate::image::{reflect_index, RgbImage};
use crate::tiling::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalParams {
    pub min_diameter_px: usize,
    pub max_diameter_px: usize,
    /// Minimum center-surround response, in 8-bit luminance units.
    pub contrast_threshold: f32,
    pub center_radius: usize,
    pub surround_radii: Vec<usize>,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        Self {
            min_diameter_px: 6,
            max_diameter_px: 240,
            contrast_threshold: 12.0,
            center_radius: 1,
            surround_radii: vec![8, 24, 64],
        }
    }
}

impl ClassicalParams {
    pub fn validate(&self) -> Result<()> {
        if self.surround_radii.is_empty() || self.surround_radii.iter().any(|&r| r <= self.center_radius) {
            return Err(UdError::Config("detector.classical.surround_radii must exceed center_radius".into()));
        }
        if !(self.contrast_threshold > 0.0) || self.min_diameter_px > self.max_diameter_px {
            return Err(UdError::Config("detector.classical: invalid threshold or diameter range".into()));
        }
        Ok(())
    }
}

pub fn luminance(img: &RgbImage) -> Vec<f32> {
    img.data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
        .collect()
}

/// Summed-area table over a reflect-padded plane, for O(1) box means.
struct BoxFilter {
    pad: usize,
    stride: usize,
    sums: Vec<f64>,
}

impl BoxFilter {
    fn new(values: &[f32], w: usize, h: usize, pad: usize) -> Self {
        let (pw, ph) = (w + 2 * pad, h + 2 * pad);
        let stride = pw + 1;
        let mut sums = vec![0.0f64; stride * (ph + 1)];
        for y in 0..ph {
            let sy = reflect_index(y as isize - pad as isize, h);
            let mut row = 0.0;
            for x in 0..pw {
                let sx = reflect_index(x as isize - pad as isize, w);
                row += values[sy * w + sx] as f64;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { pad, stride, sums }
    }

    /// Mean over the `(2r+1)²` square centered at `(x, y)`; requires `r ≤ pad`.
    fn mean(&self, x: usize, y: usize, r: usize) -> f32 {
        let (x0, y0) = (x + self.pad - r, y + self.pad - r);
        let (x1, y1) = (x + self.pad + r + 1, y + self.pad + r + 1);
        let s = self.sums[y1 * self.stride + x1] - self.sums[y0 * self.stride + x1] - self.sums[y1 * self.stride + x0]
            + self.sums[y0 * self.stride + x0];
        (s / ((2 * r + 1) * (2 * r + 1)) as f64) as f32
    }
}

/// Per-pixel darkness relative to the surround, max over scales.
pub fn contrast_map(img: &RgbImage, params: &ClassicalParams) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let lum = luminance(img);
    let pad = *params.surround_radii.iter().max().expect("validated non-empty");
    let filter = BoxFilter::new(&lum, w, h, pad);
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let center = filter.mean(x, y, params.center_radius);
            out[y * w + x] = params
                .surround_radii
                .iter()
                .map(|&r| filter.mean(x, y, r) - center)
                .fold(f32::NEG_INFINITY, f32::max);
        }
    }
    out
}

/// Boxes of dark blobs in tile coordinates, confidence = blob peak contrast
/// divided by the strongest blob's peak in this tile.
pub fn baseline_blob_detect(img: &RgbImage, params: &ClassicalParams) -> Vec<BoundingBox> {
    let (w, h) = (img.width, img.height);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let response = contrast_map(img, params);
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || response[start] < params.contrast_threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut peak = 0.0f32;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            peak = peak.max(response[i]);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && response[j] >= params.contrast_threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        let diameter = (x1 - x0 + 1).max(y1 - y0 + 1);
        if diameter >= params.min_diameter_px && diameter <= params.max_diameter_px {
            blobs.push((BoundingBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64, 0.0), peak));
        }
    }
    let top = blobs.iter().map(|(_, p)| *p).fold(0.0f32, f32::max);
    blobs
        .into_iter()
        .map(|(mut b, p)| {
            b.confidence = (p / top).clamp(0.0, 1.0) as f64;
            b
        })
        .collect()
}
