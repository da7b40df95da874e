//! Lesion detection on tiles and fixed-size lesion cropping.

pub mod classical;
pub mod neural;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CHECKPOINT_FORMAT_VERSION};
use crate::error::{Result, UdError};
use crate::image::{Plane, RgbImage, WideFieldImage};
use crate::nn::Module;
use crate::synthgen::{LesionId, SynthGroundTruth};
use crate::tiling::{BoundingBox, Tile, TileGrid, DEFAULT_NMS_IOU, DEFAULT_TILE_SIZE};

pub use classical::{baseline_blob_detect, ClassicalParams};
pub use neural::{LabelledTile, NeuralNet, NeuralTrainConfig};

pub const DEFAULT_CROP_SIZE: usize = 64;
/// Margin added around lesions larger than the crop window before resampling.
pub const OVERSIZE_MARGIN: f64 = 0.10;
const CHECKPOINT_KIND: &str = "detector";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Neural,
    #[default]
    Classical,
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Neural => "neural",
            Self::Classical => "classical",
        })
    }
}

impl FromStr for DetectorKind {
    type Err = UdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural" => Ok(Self::Neural),
            "classical" => Ok(Self::Classical),
            other => Err(UdError::Config(format!("detector.kind: unknown value {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub confidence_threshold: f64,
    pub checkpoint_path: Option<String>,
    pub crop_size: usize,
    pub classical: ClassicalParams,
    pub training: NeuralTrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Classical,
            confidence_threshold: 0.05,
            checkpoint_path: None,
            crop_size: DEFAULT_CROP_SIZE,
            classical: ClassicalParams::default(),
            training: NeuralTrainConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(UdError::Config("detector.confidence_threshold must lie in [0, 1]".into()));
        }
        if self.crop_size < 8 {
            return Err(UdError::Config("detector.crop_size must be at least 8".into()));
        }
        self.classical.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub confidence_threshold: f64,
    pub classical: ClassicalParams,
    /// Present iff `kind` is neural.
    pub net: Option<NeuralNet>,
    pub training_config: Option<NeuralTrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSidecar {
    pub kind: DetectorKind,
    pub crop_size: usize,
    pub confidence_threshold: f64,
    pub input_size: usize,
    pub anchors: Vec<f64>,
    pub training_config: Option<NeuralTrainConfig>,
    pub format_version: u32,
}

impl DetectorModel {
    pub fn classical(params: ClassicalParams, confidence_threshold: f64) -> Self {
        Self { kind: DetectorKind::Classical, confidence_threshold, classical: params, net: None, training_config: None }
    }

    /// Build from config; the neural kind loads its checkpoint.
    pub fn from_config(cfg: &DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            DetectorKind::Classical => Ok(Self::classical(cfg.classical.clone(), cfg.confidence_threshold)),
            DetectorKind::Neural => {
                let path = cfg.checkpoint_path.as_deref().ok_or_else(|| {
                    UdError::Config("detector.kind = neural requires detector.checkpoint_path".into())
                })?;
                let mut m = Self::load(Path::new(path))?;
                m.confidence_threshold = cfg.confidence_threshold;
                Ok(m)
            }
        }
    }

    pub fn input_size(&self) -> Option<usize> {
        self.net.as_ref().map(|n| n.input_size)
    }

    pub fn save(&self, path: &Path, crop_size: usize) -> Result<()> {
        let net = self
            .net
            .as_ref()
            .ok_or_else(|| UdError::InvalidInput("classical detectors have no weights to save".into()))?;
        let side = DetectorSidecar {
            kind: self.kind,
            crop_size,
            confidence_threshold: self.confidence_threshold,
            input_size: net.input_size,
            anchors: net.anchors.clone(),
            training_config: self.training_config.clone(),
            format_version: CHECKPOINT_FORMAT_VERSION,
        };
        checkpoint::save(path, CHECKPOINT_KIND, &net.params(), &side)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: DetectorSidecar = checkpoint::read_sidecar(path)?;
        if side.kind != DetectorKind::Neural || side.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(UdError::Checkpoint {
                path: path.to_owned(),
                reason: format!("unsupported sidecar (kind {}, format {})", side.kind, side.format_version),
            });
        }
        let weights = checkpoint::read_weights(path, CHECKPOINT_KIND)?;
        let mut net = NeuralNet::new(side.input_size, side.anchors.clone(), 0)?;
        checkpoint::load_into(&mut net, weights, path)?;
        Ok(Self {
            kind: DetectorKind::Neural,
            confidence_threshold: side.confidence_threshold,
            classical: ClassicalParams::default(),
            net: Some(net),
            training_config: side.training_config,
        })
    }
}

/// Boxes in tile coordinates with confidence ≥ the model threshold.
pub fn detect_tile(model: &DetectorModel, tile: &Tile) -> Result<Vec<BoundingBox>> {
    let boxes = match (&model.kind, &model.net) {
        (DetectorKind::Classical, _) => baseline_blob_detect(&tile.pixels, &model.classical),
        (DetectorKind::Neural, Some(net)) => {
            if tile.size() != net.input_size || tile.pixels.height != net.input_size {
                return Err(UdError::InvalidInput(format!(
                    "tile is {}×{}, neural detector expects {}",
                    tile.pixels.width, tile.pixels.height, net.input_size
                )));
            }
            net.predict(&tile.pixels, model.confidence_threshold, DEFAULT_NMS_IOU)
        }
        (DetectorKind::Neural, None) => {
            return Err(UdError::Untrained("neural detector has no loaded weights".into()));
        }
    };
    Ok(boxes.into_iter().filter(|b| b.confidence >= model.confidence_threshold).collect())
}

pub fn train_neural_detector(tiles: &[LabelledTile], cfg: &NeuralTrainConfig) -> Result<(DetectorModel, Vec<f64>)> {
    let size = tiles.first().map(|t| t.pixels.width).unwrap_or(DEFAULT_TILE_SIZE);
    let (net, history) = neural::train(tiles, size, cfg)?;
    let model = DetectorModel {
        kind: DetectorKind::Neural,
        confidence_threshold: 0.5,
        classical: ClassicalParams::default(),
        net: Some(net),
        training_config: Some(cfg.clone()),
    };
    Ok((model, history))
}

/// Tiles of a synthetic patient with their visible boxes. Lesions with less
/// than half their box inside a tile become ignore regions.
pub fn labelled_tiles(image: &WideFieldImage, truth: &SynthGroundTruth, grid: TileGrid) -> Result<Vec<LabelledTile>> {
    let tiles = crate::tiling::tile_image(image, grid.tile_size, grid.overlap_fraction)?;
    Ok(tiles
        .into_iter()
        .map(|t| {
            let s = t.size() as f64;
            let (ox, oy) = (t.origin_x as f64, t.origin_y as f64);
            let mut boxes = Vec::new();
            let mut ignore = Vec::new();
            for b in &truth.boxes {
                let local = BoundingBox::new(b.x_min - ox, b.y_min - oy, b.x_max - ox, b.y_max - oy, 1.0);
                let clipped = local.clipped(s, s);
                if !clipped.is_valid() {
                    continue;
                }
                if clipped.area() >= 0.5 * local.area() {
                    boxes.push(clipped);
                } else {
                    ignore.push(clipped);
                }
            }
            LabelledTile { pixels: t.pixels, boxes, ignore }
        })
        .collect())
}

/// Square source window `(x0, y0, side)` for a lesion crop.
pub fn crop_window(b: &BoundingBox, crop_size: usize) -> (isize, isize, usize) {
    let (cx, cy) = b.center();
    let longer = b.width().max(b.height());
    let side = if longer > crop_size as f64 { (longer * (1.0 + OVERSIZE_MARGIN)).ceil() as usize } else { crop_size };
    let half = side as f64 / 2.0;
    ((cx - half).round() as isize, (cy - half).round() as isize, side)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionCrop {
    pub lesion_id: LesionId,
    pub pixels: RgbImage,
    pub source_box: BoundingBox,
    pub center: (f64, f64),
    /// Source window in image pixels before any resampling.
    pub window: (isize, isize, usize),
}

impl LesionCrop {
    /// The matching window of a full-image mask, resampled like the pixels.
    pub fn crop_mask(&self, mask: &Plane<u8>) -> Plane<u8> {
        let (x0, y0, side) = self.window;
        let m = mask.window_reflect(x0, y0, side, side);
        if side == self.pixels.width {
            m
        } else {
            m.resize_nearest(self.pixels.width, self.pixels.height)
        }
    }
}

/// Fixed-size window centered on the box; reflect-padded at image edges.
/// Boxes longer than the crop get a 10% margin and are resampled down.
pub fn crop_lesion(image: &WideFieldImage, b: &BoundingBox, crop_size: usize, lesion_id: LesionId) -> LesionCrop {
    let window = crop_window(b, crop_size);
    let (x0, y0, side) = window;
    let raw = image.pixels.window_reflect(x0, y0, side, side);
    let pixels = if side == crop_size { raw } else { raw.resize_bilinear(crop_size, crop_size) };
    LesionCrop { lesion_id, pixels, source_box: *b, center: b.center(), window }
}
