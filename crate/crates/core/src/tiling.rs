//! Overlapping tile grid over a wide-field image, tile-to-image coordinate
//! mapping, and greedy non-max suppression of the aggregated detections.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdError};
use crate::image::{RgbImage, WideFieldImage};

pub const DEFAULT_TILE_SIZE: usize = 512;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Axis-aligned box in pixel coordinates with a detection confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, confidence: f64) -> Self {
        Self { x_min, y_min, x_max, y_max, confidence }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && (0.0..=1.0).contains(&self.confidence)
            && [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
            confidence: self.confidence,
        }
    }

    /// Descending confidence, then ascending `(x_min, y_min, x_max, y_max)`.
    pub fn nms_order(a: &Self, b: &Self) -> Ordering {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.x_min.total_cmp(&b.x_min))
            .then(a.y_min.total_cmp(&b.y_min))
            .then(a.x_max.total_cmp(&b.x_max))
            .then(a.y_max.total_cmp(&b.y_max))
    }
}

/// A square window of the (possibly reflect-padded) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub origin_x: usize,
    pub origin_y: usize,
    pub pixels: RgbImage,
    pub image_width: usize,
    pub image_height: usize,
}

impl Tile {
    pub fn size(&self) -> usize {
        self.pixels.width
    }

    /// Whether a tile-local box touches an edge that is interior to the image,
    /// i.e. the box may be a truncated view of a lesion another tile sees whole.
    pub fn touches_interior_edge(&self, b: &BoundingBox, margin: f64) -> bool {
        let s = self.size() as f64;
        let left = self.origin_x > 0 && b.x_min <= margin;
        let top = self.origin_y > 0 && b.y_min <= margin;
        let right = self.origin_x + self.size() < self.image_width && b.x_max >= s - margin;
        let bottom = self.origin_y + self.size() < self.image_height && b.y_max >= s - margin;
        left || top || right || bottom
    }
}

/// Tile grid parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap_fraction: f64,
}

impl Default for TileGrid {
    fn default() -> Self {
        Self { tile_size: DEFAULT_TILE_SIZE, overlap_fraction: DEFAULT_OVERLAP }
    }
}

impl TileGrid {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(UdError::Config("tile_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(UdError::Config(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        ((self.tile_size as f64 * (1.0 - self.overlap_fraction)).round() as usize).max(1)
    }

    /// Tile origins along one axis of length `dim`.
    pub fn origins(&self, dim: usize) -> Vec<usize> {
        let t = self.tile_size;
        if dim <= t {
            return vec![0];
        }
        let stride = self.stride();
        let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + t <= dim).collect();
        if out.last().map_or(true, |&o| o + t < dim) {
            out.push(dim - t);
        }
        out
    }
}

/// Split `image` into overlapping `tile_size` squares. Dimensions smaller than
/// a tile are reflect-padded; otherwise the last row/column is clamped to the edge.
pub fn tile_image(image: &WideFieldImage, tile_size: usize, overlap_fraction: f64) -> Result<Vec<Tile>> {
    let grid = TileGrid { tile_size, overlap_fraction };
    grid.validate()?;
    let px = &image.pixels;
    if px.is_empty() {
        return Err(UdError::EmptyImage { width: px.width, height: px.height });
    }
    let xs = grid.origins(px.width);
    let ys = grid.origins(px.height);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            tiles.push(Tile {
                origin_x: ox,
                origin_y: oy,
                pixels: px.window_reflect(ox as isize, oy as isize, tile_size, tile_size),
                image_width: px.width,
                image_height: px.height,
            });
        }
    }
    Ok(tiles)
}

/// Translate a tile-local box into full-image coordinates, clipped to the image.
pub fn to_full_coords(tile: &Tile, b: &BoundingBox) -> BoundingBox {
    let (dx, dy) = (tile.origin_x as f64, tile.origin_y as f64);
    BoundingBox { x_min: b.x_min + dx, y_min: b.y_min + dy, x_max: b.x_max + dx, y_max: b.y_max + dy, ..*b }
        .clipped(tile.image_width as f64, tile.image_height as f64)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy non-max suppression; output is sorted by [`BoundingBox::nms_order`].
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(BoundingBox::nms_order);
    let mut kept: Vec<BoundingBox> = Vec::new();
    for cand in sorted {
        if kept.iter().all(|k| iou(k, &cand) <= iou_threshold) {
            kept.push(cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize) -> WideFieldImage {
        WideFieldImage::new(RgbImage::filled(w, h, [180, 140, 120]), "p").unwrap()
    }

    fn origins(tiles: &[Tile]) -> (Vec<usize>, Vec<usize>) {
        let mut xs: Vec<_> = tiles.iter().map(|t| t.origin_x).collect();
        let mut ys: Vec<_> = tiles.iter().map(|t| t.origin_y).collect();
        xs.sort();
        xs.dedup();
        ys.sort();
        ys.dedup();
        (xs, ys)
    }

    #[test]
    fn single_tile_for_tile_sized_image() {
        let tiles = tile_image(&image(512, 512), 512, 0.5).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].origin_x, tiles[0].origin_y), (0, 0));
    }

    #[test]
    fn two_tiles_for_768_wide() {
        let tiles = tile_image(&image(768, 512), 512, 0.5).unwrap();
        assert_eq!(origins(&tiles).0, vec![0, 256]);
        assert_eq!(tiles.len(), 2);
    }

    #[test]
    fn back_photo_grid() {
        let tiles = tile_image(&image(1640, 1116), 512, 0.5).unwrap();
        let (xs, ys) = origins(&tiles);
        assert_eq!(xs, vec![0, 256, 512, 768, 1024, 1128]);
        assert_eq!(ys, vec![0, 256, 512, 604]);
        assert_eq!(tiles.len(), 24);
    }

    #[test]
    fn small_image_is_reflect_padded() {
        let mut px = RgbImage::filled(100, 40, [10, 10, 10]);
        px.put(90, 0, [200, 0, 0]);
        let img = WideFieldImage::new(px, "p").unwrap();
        let tiles = tile_image(&img, 128, 0.5).unwrap();
        assert_eq!(tiles.len(), 1);
        let t = &tiles[0];
        assert_eq!(t.size(), 128);
        assert_eq!(t.pixels.get(90, 0), [200, 0, 0]);
        assert_eq!(t.pixels.get(99, 0), [10, 10, 10]);
        // padded column 108 mirrors back onto column 90
        assert_eq!(t.pixels.get(108, 0), [200, 0, 0]);
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(tile_image(&image(10, 10), 0, 0.5).is_err());
        assert!(tile_image(&image(10, 10), 4, 1.0).is_err());
        assert!(tile_image(&image(10, 10), 4, -0.1).is_err());
    }

    #[test]
    fn full_coords_translate_and_clip() {
        let img = image(1640, 1116);
        let tiles = tile_image(&img, 512, 0.5).unwrap();
        let b = BoundingBox::new(10.0, 10.0, 30.0, 30.0, 0.7);
        let t0 = tiles.iter().find(|t| t.origin_x == 0 && t.origin_y == 0).unwrap();
        assert_eq!(to_full_coords(t0, &b).coords(), [10.0, 10.0, 30.0, 30.0]);
        let t1 = tiles.iter().find(|t| t.origin_x == 256 && t.origin_y == 0).unwrap();
        let moved = to_full_coords(t1, &b);
        assert_eq!(moved.coords(), [266.0, 10.0, 286.0, 30.0]);
        assert_eq!(moved.confidence, 0.7);
        let corner = tiles.iter().find(|t| t.origin_x == 1128 && t.origin_y == 604).unwrap();
        let edge = to_full_coords(corner, &BoundingBox::new(500.0, 500.0, 520.0, 520.0, 0.5));
        assert_eq!(edge.coords(), [1628.0, 1104.0, 1640.0, 1116.0]);
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(5.0, 5.0, 6.0, 6.0, 1.0)), 0.0);
        let b = BoundingBox::new(1.0, 0.0, 3.0, 2.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.45).is_empty());
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = BoundingBox { confidence: 0.8, ..a };
        assert_eq!(nms(&[b, a], 0.45), vec![a]);
    }

    #[test]
    fn nms_breaks_confidence_ties_by_position() {
        let a = BoundingBox::new(50.0, 0.0, 60.0, 10.0, 0.5);
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0.5);
        let c = BoundingBox::new(0.0, 20.0, 10.0, 30.0, 0.5);
        assert_eq!(nms(&[a, c, b], 0.45), vec![b, c, a]);
    }

    #[test]
    fn interior_edge_detection() {
        let img = image(1024, 512);
        let tiles = tile_image(&img, 512, 0.5).unwrap();
        let left = &tiles[0];
        let b = BoundingBox::new(0.0, 100.0, 10.0, 110.0, 1.0);
        // x = 0 is the true image edge for the first tile
        assert!(!left.touches_interior_edge(&b, 1.0));
        let r = BoundingBox::new(500.0, 100.0, 512.0, 110.0, 1.0);
        assert!(left.touches_interior_edge(&r, 1.0));
        let last = tiles.last().unwrap();
        assert!(!last.touches_interior_edge(&r, 1.0));
    }
}
