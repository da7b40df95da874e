//! Pixel containers and the resampling helpers shared by the pipeline stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdError};
use crate::nn::Tensor;

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel lookup with reflect-101 extension beyond the borders.
    #[inline]
    pub fn get_reflect(&self, x: isize, y: isize) -> [u8; 3] {
        self.get(reflect_index(x, self.width), reflect_index(y, self.height))
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    /// Extract a `w×h` window whose top-left corner is `(x0, y0)`; out-of-range
    /// pixels are reflected back into the image.
    pub fn window_reflect(&self, x0: isize, y0: isize, w: usize, h: usize) -> RgbImage {
        let inside = x0 >= 0 && y0 >= 0 && x0 as usize + w <= self.width && y0 as usize + h <= self.height;
        if inside {
            let mut data = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                let start = ((y0 as usize + y) * self.width + x0 as usize) * 3;
                data.extend_from_slice(&self.data[start..start + w * 3]);
            }
            return RgbImage { width: w, height: h, data };
        }
        RgbImage::from_fn(w, h, |x, y| self.get_reflect(x0 + x as isize, y0 + y as isize))
    }

    /// Triangle-filter (bilinear) resample to `w×h`, antialiased when shrinking.
    pub fn resize_bilinear(&self, w: usize, h: usize) -> RgbImage {
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        let src = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("raster matches dimensions");
        let out = ::image::imageops::resize(&src, w as u32, h as u32, ::image::imageops::FilterType::Triangle);
        RgbImage { width: w, height: h, data: out.into_raw() }
    }

    /// CHW float tensor with values scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0f32; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::from_vec(1, 3, self.height, self.width, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self { width: w as usize, height: h as usize, data: img.into_raw() })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| UdError::InvalidInput("raster size does not match dimensions".into()))?;
        buf.save(path)?;
        Ok(())
    }
}

/// Reflect-101 index mapping (`-1 → 1`, `n → n-2`), periodic for far offsets.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Single-channel raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![T::default(); width * height] }
    }

    pub fn filled(width: usize, height: usize, v: T) -> Self {
        Self { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn window_reflect(&self, x0: isize, y0: isize, w: usize, h: usize) -> Plane<T> {
        let mut out = Plane::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let sx = reflect_index(x0 + x as isize, self.width);
                let sy = reflect_index(y0 + y as isize, self.height);
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

impl Plane<u8> {
    /// Nearest-neighbour resample, suitable for label masks.
    pub fn resize_nearest(&self, w: usize, h: usize) -> Plane<u8> {
        let mut out = Plane::new(w, h);
        for y in 0..h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / h as f64) as usize).min(self.height - 1);
            for x in 0..w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / w as f64) as usize).min(self.width - 1);
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

/// A patient-level wide-field photograph.
#[derive(Debug, Clone, PartialEq)]
pub struct WideFieldImage {
    pub pixels: RgbImage,
    pub patient_id: String,
    pub source_path: String,
}

impl WideFieldImage {
    pub fn new(pixels: RgbImage, patient_id: impl Into<String>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(UdError::EmptyImage { width: pixels.width, height: pixels.height });
        }
        Ok(Self { pixels, patient_id: patient_id.into(), source_path: String::new() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pixels = RgbImage::load_png(path)?;
        let patient_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut img = Self::new(pixels, patient_id)?;
        img.source_path = path.display().to_string();
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_repeating_edge() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(2, 5), 2);
        assert_eq!(reflect_index(-7, 1), 0);
        // far offsets stay in range
        for i in -40..40 {
            assert!(reflect_index(i, 3) < 3);
        }
    }

    #[test]
    fn empty_image_is_rejected() {
        assert!(matches!(WideFieldImage::new(RgbImage::new(0, 4), "p"), Err(UdError::EmptyImage { .. })));
    }

    #[test]
    fn resize_of_constant_image_is_constant() {
        let img = RgbImage::filled(128, 96, [200, 150, 120]);
        let small = img.resize_bilinear(64, 64);
        assert!(small.data.chunks(3).all(|p| p == [200, 150, 120]));
    }
}
