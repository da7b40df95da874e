//! Pipeline configuration: one JSON document whose sections mirror the
//! module config keys. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::hex_digest;
use crate::detector::DetectorConfig;
use crate::error::{Result, UdError};
use crate::evalmetrics::TopKSemantics;
use crate::scoring::{DistanceSource, PipelineMode, StdMode};
use crate::segmenter::SegmenterConfig;
use crate::tiling::{TileGrid, DEFAULT_NMS_IOU, DEFAULT_OVERLAP, DEFAULT_TILE_SIZE};
use crate::vae::VaeConfig;

pub const DEFAULT_HOME_DIR: &str = ".uglyduck";
pub const SEGMENTER_FILE: &str = "segmenter.ckpt";
pub const VAE_BASE_FILE: &str = "vae_base.ckpt";
pub const DETECTOR_FILE: &str = "detector.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub std_mode: StdMode,
    pub distance_source: DistanceSource,
    pub topk_semantics: TopKSemantics,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { std_mode: StdMode::Population, distance_source: DistanceSource::EmbeddingL2, topk_semantics: TopKSemantics::Any }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub mode: PipelineMode,
    /// Outline color for flagged lesions in `annotated.png`.
    pub rectangle_color: [u8; 3],
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { mode: PipelineMode::Finetune, rectangle_color: [0, 0, 255] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Overrides `UD_HOME` and the home-directory default.
    pub checkpoint_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub tile_size: usize,
    pub overlap_fraction: f64,
    pub nms_iou: f64,
    pub detector: DetectorConfig,
    pub segmenter: SegmenterConfig,
    pub vae: VaeConfig,
    pub scoring: ScoringConfig,
    pub pipeline: PipelineSection,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tile_size: DEFAULT_TILE_SIZE,
            overlap_fraction: DEFAULT_OVERLAP,
            nms_iou: DEFAULT_NMS_IOU,
            detector: DetectorConfig::default(),
            segmenter: SegmenterConfig::default(),
            vae: VaeConfig::default(),
            scoring: ScoringConfig::default(),
            pipeline: PipelineSection::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| UdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UdError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| UdError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().validate()?;
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(UdError::Config("nms_iou must lie in [0, 1]".into()));
        }
        self.detector.validate()?;
        self.vae.validate()?;
        if self.segmenter.base_channels == 0 || self.segmenter.training.batch_size == 0 {
            return Err(UdError::Config("segmenter.base_channels and batch_size must be positive".into()));
        }
        if self.detector.crop_size % 16 != 0 {
            return Err(UdError::Config("detector.crop_size must be divisible by 16 for the segmenter".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> TileGrid {
        TileGrid { tile_size: self.tile_size, overlap_fraction: self.overlap_fraction }
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }

    /// `paths.checkpoint_dir`, else `ud_home`, else `$HOME/.uglyduck`.
    pub fn checkpoint_dir(&self, ud_home: Option<&str>) -> PathBuf {
        if let Some(d) = &self.paths.checkpoint_dir {
            return PathBuf::from(d);
        }
        if let Some(h) = ud_home.filter(|h| !h.is_empty()) {
            return PathBuf::from(h);
        }
        std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")).join(DEFAULT_HOME_DIR)
    }

    pub fn segmenter_checkpoint(&self, ud_home: Option<&str>) -> PathBuf {
        self.segmenter.checkpoint_path.as_ref().map(PathBuf::from).unwrap_or_else(|| self.checkpoint_dir(ud_home).join(SEGMENTER_FILE))
    }

    pub fn vae_base_checkpoint(&self, ud_home: Option<&str>) -> PathBuf {
        self.vae.base_checkpoint.as_ref().map(PathBuf::from).unwrap_or_else(|| self.checkpoint_dir(ud_home).join(VAE_BASE_FILE))
    }

    pub fn detector_checkpoint(&self, ud_home: Option<&str>) -> PathBuf {
        self.detector.checkpoint_path.as_ref().map(PathBuf::from).unwrap_or_else(|| self.checkpoint_dir(ud_home).join(DETECTOR_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"tile_sise": 512}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"vae": {"latent": 3}}"#).is_err());
        let cfg = PipelineConfig::from_json(r#"{"vae": {"beta": 2.0}, "pipeline": {"mode": "scratch"}}"#).unwrap();
        assert_eq!(cfg.vae.beta, 2.0);
        assert_eq!(cfg.pipeline.mode, PipelineMode::Scratch);
        assert!(PipelineConfig::from_json(r#"{"overlap_fraction": 1.0}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig { seed: 1, ..PipelineConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn checkpoint_dir_precedence() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.checkpoint_dir(Some("/x")), PathBuf::from("/x"));
        cfg.paths.checkpoint_dir = Some("/y".into());
        assert_eq!(cfg.checkpoint_dir(Some("/x")), PathBuf::from("/y"));
        assert_eq!(cfg.vae_base_checkpoint(None), PathBuf::from("/y").join(VAE_BASE_FILE));
    }
}
