//! End-to-end per-patient analysis: tiling, detection, NMS, cropping,
//! segmentation and masking, VAE training or fine-tuning, scoring.

use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::detector::{crop_lesion, detect_tile, DetectorKind, DetectorModel};
use crate::error::{Result, UdError};
use crate::evalmetrics::{GroundTruth, Label};
use crate::image::{RgbImage, WideFieldImage};
use crate::scoring::{
    build_report, embedding_distances, DistanceSource, DistanceVector, PatientReport, PipelineMode,
};
use crate::segmenter::{
    build_compact_unet, lesion_pairs, mask_iou, mask_pixels, segment_all, select_threshold, skin_negatives, train_segmenter,
    SegTrainLog, SegmenterModel,
};
use crate::synthgen::{LesionId, SynthGroundTruth};
use crate::tiling::{iou, nms, tile_image, to_full_coords, BoundingBox};
use crate::vae::{embed_all, finetune, recon_score, train_scratch, VaeModel};

/// Boxes within this many pixels of an interior tile edge are left to the
/// neighbouring tile, which sees the lesion whole.
const INTERIOR_EDGE_MARGIN: f64 = 1.0;
/// Minimum IoU for transferring a ground-truth label onto a detection.
pub const LABEL_MATCH_IOU: f64 = 0.3;

/// Models an analysis run needs; which ones are required depends on the mode.
#[derive(Debug, Clone)]
pub struct Models {
    pub detector: DetectorModel,
    pub segmenter: Option<SegmenterModel>,
    pub base_vae: Option<VaeModel>,
}

impl Models {
    /// Load whatever `cfg` requires, failing early with a pointer to the fix.
    pub fn load(cfg: &PipelineConfig, ud_home: Option<&str>) -> Result<Self> {
        let mut det_cfg = cfg.detector.clone();
        if det_cfg.kind == DetectorKind::Neural && det_cfg.checkpoint_path.is_none() {
            det_cfg.checkpoint_path = Some(cfg.detector_checkpoint(ud_home).to_string_lossy().into_owned());
        }
        let detector = DetectorModel::from_config(&det_cfg)?;
        let segmenter = if cfg.segmenter.enabled {
            let path = cfg.segmenter_checkpoint(ud_home);
            if !path.exists() {
                return Err(UdError::Checkpoint {
                    path,
                    reason: "segmenter checkpoint not found; run `uglyduck segment-train` first, \
                             set segmenter.checkpoint_path, or set segmenter.enabled to false"
                        .into(),
                });
            }
            let mut m = SegmenterModel::load(&path)?;
            m.masking_policy = cfg.segmenter.masking_policy;
            Some(m)
        } else {
            None
        };
        let base_vae = match cfg.pipeline.mode {
            PipelineMode::Scratch => None,
            PipelineMode::Finetune | PipelineMode::EmbedOnly => {
                let path = cfg.vae_base_checkpoint(ud_home);
                if !path.exists() {
                    return Err(UdError::Checkpoint {
                        path,
                        reason: format!(
                            "base VAE checkpoint not found, required by pipeline.mode = {}; \
                             run `uglyduck vae-pretrain` first or set vae.base_checkpoint",
                            cfg.pipeline.mode
                        ),
                    });
                }
                Some(VaeModel::load(&path)?.0)
            }
        };
        Ok(Self { detector, segmenter, base_vae })
    }
}

/// Detect over overlapping tiles and merge into full-image boxes, numbered in
/// reading order (top-to-bottom, then left-to-right).
pub fn detect_lesions(image: &WideFieldImage, detector: &DetectorModel, cfg: &PipelineConfig) -> Result<Vec<(LesionId, BoundingBox)>> {
    let tiles = tile_image(image, cfg.tile_size, cfg.overlap_fraction)?;
    let mut all = Vec::new();
    for tile in &tiles {
        for b in detect_tile(detector, tile)? {
            if !tile.touches_interior_edge(&b, INTERIOR_EDGE_MARGIN) {
                let full = to_full_coords(tile, &b);
                if full.is_valid() {
                    all.push(full);
                }
            }
        }
    }
    let mut kept = nms(&all, cfg.nms_iou);
    kept.sort_by(|a, b| {
        a.y_min.total_cmp(&b.y_min).then(a.x_min.total_cmp(&b.x_min)).then(BoundingBox::nms_order(a, b))
    });
    Ok(kept.into_iter().enumerate().map(|(i, b)| (i as LesionId, b)).collect())
}

/// Crops fed to the VAE: masked when a segmenter is supplied, raw otherwise.
pub fn prepare_lesions(
    image: &WideFieldImage,
    boxes: &[(LesionId, BoundingBox)],
    segmenter: Option<&SegmenterModel>,
    crop_size: usize,
) -> Result<Vec<(LesionId, RgbImage)>> {
    let crops: Vec<_> = boxes.iter().map(|(id, b)| crop_lesion(image, b, crop_size, *id)).collect();
    let Some(seg) = segmenter else {
        return Ok(crops.into_iter().map(|c| (c.lesion_id, c.pixels)).collect());
    };
    let pixels: Vec<RgbImage> = crops.iter().map(|c| c.pixels.clone()).collect();
    let masks = segment_all(seg, &pixels)?;
    crops
        .iter()
        .zip(masks)
        .map(|(c, m)| Ok((c.lesion_id, mask_pixels(&c.pixels, &m.binary, seg.masking_policy)?)))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub detect_s: f64,
    pub prepare_s: f64,
    pub vae_s: f64,
    pub total_s: f64,
    pub vae_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Legend {
    pub threshold: Option<f64>,
    pub mean_distance: Option<f64>,
    pub std_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub pixels: RgbImage,
    pub legend: Legend,
    /// Lesions outlined, equal to the report's UD set.
    pub outlined: Vec<LesionId>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: PatientReport,
    pub annotated: AnnotatedImage,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

/// Train or adapt the VAE per mode, then score.
pub fn score_lesions(
    patient_id: &str,
    boxes: &[(LesionId, BoundingBox)],
    lesions: &[(LesionId, RgbImage)],
    cfg: &PipelineConfig,
    base: Option<&VaeModel>,
) -> Result<(PatientReport, usize)> {
    let mode = cfg.pipeline.mode;
    if lesions.len() < 2 {
        return Ok((PatientReport::unscored(patient_id, boxes, mode), 0));
    }
    let crops: Vec<RgbImage> = lesions.iter().map(|(_, c)| c.clone()).collect();
    let missing_base = || UdError::Untrained(format!("pipeline.mode = {mode} needs a base VAE"));
    let model = match mode {
        PipelineMode::Scratch => train_scratch(&crops, cfg.vae.scratch_epochs, &cfg.vae, cfg.seed)?.0,
        PipelineMode::Finetune => {
            finetune(base.ok_or_else(missing_base)?, &crops, cfg.vae.finetune_epochs, &cfg.vae, cfg.seed)?.0
        }
        PipelineMode::EmbedOnly => base.ok_or_else(missing_base)?.clone(),
    };
    let distances = match cfg.scoring.distance_source {
        DistanceSource::EmbeddingL2 => {
            let refs: Vec<(LesionId, &RgbImage)> = lesions.iter().map(|(id, c)| (*id, c)).collect();
            embedding_distances(patient_id, &embed_all(&model, &refs)?)?
        }
        DistanceSource::Reconstruction => DistanceVector::new(
            patient_id,
            lesions.iter().map(|(id, c)| Ok((*id, recon_score(&model, c)?))).collect::<Result<Vec<_>>>()?,
            DistanceSource::Reconstruction,
        )?,
    };
    let epochs = match mode {
        PipelineMode::Scratch => cfg.vae.scratch_epochs,
        PipelineMode::Finetune => cfg.vae.finetune_epochs,
        PipelineMode::EmbedOnly => 0,
    };
    Ok((build_report(patient_id, boxes, &distances, mode, cfg.scoring.std_mode)?, epochs))
}

pub fn analyze(image: &WideFieldImage, cfg: &PipelineConfig, models: &Models) -> Result<Analysis> {
    cfg.validate()?;
    let start = Instant::now();
    let mut warnings = Vec::new();
    let boxes = detect_lesions(image, &models.detector, cfg)?;
    let detect_s = start.elapsed().as_secs_f64();
    if boxes.is_empty() {
        warnings.push(format!("{}: no lesions detected; report is empty", image.patient_id));
    }
    let t = Instant::now();
    let lesions = prepare_lesions(image, &boxes, models.segmenter.as_ref(), cfg.detector.crop_size)?;
    let prepare_s = t.elapsed().as_secs_f64();
    if boxes.len() == 1 {
        warnings.push(format!("{}: one lesion detected; insufficient cohort, scoring skipped", image.patient_id));
    }
    let t = Instant::now();
    let (report, vae_epochs) = score_lesions(&image.patient_id, &boxes, &lesions, cfg, models.base_vae.as_ref())?;
    let vae_s = t.elapsed().as_secs_f64();
    for w in &warnings {
        log::warn!("{w}");
    }
    let annotated = annotate(image, &report, cfg.pipeline.rectangle_color);
    let timings = Timings { detect_s, prepare_s, vae_s, total_s: start.elapsed().as_secs_f64(), vae_epochs };
    Ok(Analysis { report, annotated, warnings, timings })
}

/// Outline every UD lesion with a 2-pixel rectangle just outside its box.
pub fn annotate(image: &WideFieldImage, report: &PatientReport, color: [u8; 3]) -> AnnotatedImage {
    let mut px = image.pixels.clone();
    let (w, h) = (px.width as isize, px.height as isize);
    let mut outlined = Vec::new();
    for l in report.lesions.iter().filter(|l| l.is_ud) {
        outlined.push(l.lesion_id);
        let [x0, y0, x1, y1] = l.bbox;
        let (x0, y0) = (x0.floor() as isize - 2, y0.floor() as isize - 2);
        let (x1, y1) = (x1.ceil() as isize + 1, y1.ceil() as isize + 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let edge = x - x0 < 2 || x1 - x < 2 || y - y0 < 2 || y1 - y < 2;
                if edge && x >= 0 && y >= 0 && x < w && y < h {
                    px.put(x as usize, y as usize, color);
                }
            }
        }
    }
    outlined.sort_unstable();
    let legend = Legend {
        threshold: report.threshold,
        mean_distance: report.mean_distance,
        std_distance: report.std_distance,
    };
    AnnotatedImage { pixels: px, legend, outlined }
}

const LEGEND_KEYS: [&str; 3] = ["threshold", "mean_distance", "std_distance"];

fn legend_text(v: Option<f64>) -> String {
    serde_json::to_string(&v).expect("f64 serializes")
}

impl AnnotatedImage {
    /// PNG with the legend stored as text chunks, formatted exactly as in the report JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.pixels.width as u32, self.pixels.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let values = [self.legend.threshold, self.legend.mean_distance, self.legend.std_distance];
        for (k, v) in LEGEND_KEYS.iter().zip(values) {
            enc.add_text_chunk(k.to_string(), legend_text(v)).map_err(|e| UdError::InvalidInput(e.to_string()))?;
        }
        let mut writer = enc.write_header().map_err(|e| UdError::InvalidInput(e.to_string()))?;
        writer.write_image_data(&self.pixels.data).map_err(|e| UdError::InvalidInput(e.to_string()))?;
        writer.finish().map_err(|e| UdError::InvalidInput(e.to_string()))?;
        Ok(())
    }

    /// Legend text chunks of a saved annotated PNG.
    pub fn read_legend(path: &Path) -> Result<Vec<(String, String)>> {
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
        let reader = decoder.read_info().map_err(|e| UdError::InvalidInput(e.to_string()))?;
        Ok(reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .map(|t| (t.keyword.clone(), t.text.clone()))
            .collect())
    }
}

/// Legend entries as the report JSON formats them.
pub fn report_legend_text(report: &PatientReport) -> Vec<(String, String)> {
    LEGEND_KEYS
        .iter()
        .zip([report.threshold, report.mean_distance, report.std_distance])
        .map(|(k, v)| (k.to_string(), legend_text(v)))
        .collect()
}

/// Outcome of transferring synthetic labels onto detected lesions.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedTruth {
    pub truth: GroundTruth,
    /// Planted outliers with no detection at IoU ≥ [`LABEL_MATCH_IOU`].
    pub missed_uds: usize,
    pub missed_commons: usize,
}

/// Label each reported lesion with its best-overlapping ground-truth lesion;
/// detections matching nothing are common.
pub fn match_truth(report: &PatientReport, truth: &SynthGroundTruth) -> MatchedTruth {
    let mut used = vec![false; truth.boxes.len()];
    let mut labels = std::collections::BTreeMap::new();
    // higher-IoU pairs claim ground truth first
    let mut pairs: Vec<(f64, LesionId, usize)> = Vec::new();
    for l in &report.lesions {
        let b = BoundingBox::new(l.bbox[0], l.bbox[1], l.bbox[2], l.bbox[3], 1.0);
        for (j, g) in truth.boxes.iter().enumerate() {
            let v = iou(&b, g);
            if v >= LABEL_MATCH_IOU {
                pairs.push((v, l.lesion_id, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, id, j) in pairs {
        if used[j] || labels.contains_key(&id) {
            continue;
        }
        used[j] = true;
        labels.insert(id, truth.labels[&(j as LesionId)]);
    }
    for l in &report.lesions {
        labels.entry(l.lesion_id).or_insert(Label::Common);
    }
    let missed = |want: Label| (0..truth.boxes.len()).filter(|&j| !used[j] && truth.labels[&(j as LesionId)] == want).count();
    MatchedTruth {
        truth: GroundTruth { patient_id: report.patient_id.clone(), labels },
        missed_uds: missed(Label::Ud),
        missed_commons: missed(Label::Common),
    }
}

/// Pooled per-patient lesion crops (masked if a segmenter is loaded) for base pretraining.
pub fn pretraining_corpus(
    images: &[WideFieldImage],
    detector: &DetectorModel,
    segmenter: Option<&SegmenterModel>,
    cfg: &PipelineConfig,
) -> Result<Vec<(String, Vec<RgbImage>)>> {
    images
        .iter()
        .map(|img| {
            let boxes = detect_lesions(img, detector, cfg)?;
            let crops = prepare_lesions(img, &boxes, segmenter, cfg.detector.crop_size)?;
            Ok((img.patient_id.clone(), crops.into_iter().map(|(_, c)| c).collect()))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SegmenterFit {
    pub model: SegmenterModel,
    pub log: SegTrainLog,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    /// Mean IoU on the held-out pairs at the selected threshold.
    pub validation_miou: f64,
}

/// Train the segmenter on synthetic patients: ground-truth masks, 20% of the
/// pairs held out for threshold selection, and skin-only negatives.
pub fn fit_segmenter(
    patients: &[(WideFieldImage, SynthGroundTruth)],
    cfg: &PipelineConfig,
    max_pairs: Option<usize>,
    seed: u64,
) -> Result<SegmenterFit> {
    let crop = cfg.detector.crop_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9_f17);
    let mut pairs: Vec<_> = patients.iter().flat_map(|(img, t)| lesion_pairs(img, t, crop)).collect();
    pairs.shuffle(&mut rng);
    if let Some(m) = max_pairs {
        pairs.truncate(m);
    }
    if pairs.len() < 5 {
        return Err(UdError::InvalidInput(format!("segmenter training needs at least 5 lesions, found {}", pairs.len())));
    }
    let validation = pairs.split_off(pairs.len() - (pairs.len() / 5).max(1));
    let per_patient = (pairs.len() / 5).div_ceil(patients.len());
    let negatives: Vec<RgbImage> =
        patients.iter().flat_map(|(img, t)| skin_negatives(img, t, crop, per_patient, &mut rng)).collect();
    let mut model = build_compact_unet(cfg.segmenter.base_channels, seed)?;
    model.masking_policy = cfg.segmenter.masking_policy;
    let (mut model, log) = train_segmenter(model, &pairs, &negatives, &cfg.segmenter.training, seed)?;
    model.binary_threshold = select_threshold(&model, &validation)?;
    let crops: Vec<RgbImage> = validation.iter().map(|(c, _)| c.clone()).collect();
    let masks = segment_all(&model, &crops)?;
    let validation_miou =
        masks.iter().zip(&validation).map(|(m, (_, g))| mask_iou(&m.binary, g)).sum::<f64>() / validation.len() as f64;
    Ok(SegmenterFit { model, log, train_pairs: pairs.len(), validation_pairs: validation.len(), validation_miou })
}
