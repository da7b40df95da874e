//! Lesion-vs-skin segmentation of 64×64 crops and background masking.

pub mod augment;
pub mod unet;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CHECKPOINT_FORMAT_VERSION};
use crate::detector::{crop_lesion, LesionCrop};
use crate::error::{Result, UdError};
use crate::image::{Plane, RgbImage, WideFieldImage};
use crate::nn::{Adam, Module, StepDownSchedule, Tensor};
use crate::synthgen::{LesionId, SynthGroundTruth};
use crate::tiling::BoundingBox;

pub use augment::AugmentConfig;
pub use unet::CompactUNet;

/// Trainable parameters of the full-size reference U-Net.
pub const REFERENCE_PARAM_COUNT: usize = 31_030_658;
pub const BUDGET_MIN_FRACTION: f64 = 0.055;
pub const BUDGET_MAX_FRACTION: f64 = 0.065;
pub const DEFAULT_BASE_CHANNELS: usize = 16;
const CHECKPOINT_KIND: &str = "segmenter";

pub fn budget_bounds() -> (usize, usize) {
    let r = REFERENCE_PARAM_COUNT as f64;
    ((r * BUDGET_MIN_FRACTION).ceil() as usize, (r * BUDGET_MAX_FRACTION).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingPolicy {
    ZeroFill,
    #[default]
    MeanSkinFill,
}

impl fmt::Display for MaskingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ZeroFill => "zero_fill",
            Self::MeanSkinFill => "mean_skin_fill",
        })
    }
}

impl FromStr for MaskingPolicy {
    type Err = UdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_fill" => Ok(Self::ZeroFill),
            "mean_skin_fill" => Ok(Self::MeanSkinFill),
            other => Err(UdError::Config(format!("segmenter.masking_policy: unknown value {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub schedule_milestones: Vec<f32>,
    pub schedule_gamma: f32,
    pub augment: AugmentConfig,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        let s = StepDownSchedule::default();
        Self {
            epochs: 30,
            learning_rate: s.base_lr,
            batch_size: 8,
            schedule_milestones: s.milestones,
            schedule_gamma: s.gamma,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Masking and segmentation stages run only when enabled.
    pub enabled: bool,
    pub base_channels: usize,
    pub masking_policy: MaskingPolicy,
    pub checkpoint_path: Option<String>,
    pub training: SegmenterTrainConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            base_channels: DEFAULT_BASE_CHANNELS,
            masking_policy: MaskingPolicy::MeanSkinFill,
            checkpoint_path: None,
            training: SegmenterTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterModel {
    pub net: CompactUNet,
    pub trainable_param_count: usize,
    pub binary_threshold: f64,
    pub masking_policy: MaskingPolicy,
    pub trained: bool,
    pub training_config: Option<SegmenterTrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterSidecar {
    pub base_channels: usize,
    pub trainable_param_count: usize,
    pub binary_threshold: f64,
    pub masking_policy: MaskingPolicy,
    pub training_config: Option<SegmenterTrainConfig>,
    pub format_version: u32,
}

/// Construct an untrained model, rejecting counts outside the parameter budget.
pub fn build_compact_unet(base_channels: usize, seed: u64) -> Result<SegmenterModel> {
    if base_channels == 0 {
        return Err(UdError::Config("segmenter.base_channels must be positive".into()));
    }
    let count = unet_param_count(3, base_channels);
    let (min, max) = budget_bounds();
    if count < min || count > max {
        return Err(UdError::ParameterBudget { count, min, max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = CompactUNet::new(3, base_channels, &mut rng);
    debug_assert_eq!(net.param_count(), count);
    Ok(SegmenterModel {
        trainable_param_count: net.param_count(),
        net,
        binary_threshold: 0.5,
        masking_policy: MaskingPolicy::default(),
        trained: false,
        training_config: None,
    })
}

/// Closed-form parameter count of [`CompactUNet`].
pub fn unet_param_count(in_channels: usize, base: usize) -> usize {
    let conv = |a: usize, c: usize| 9 * a * c + c;
    let convt = |a: usize, c: usize| 4 * a * c + c;
    let double = |a: usize, c: usize| conv(a, c) + conv(c, c);
    let mut n = double(in_channels, base);
    for l in 1..=unet::UNET_DEPTH {
        n += double(base << (l - 1), base << l);
        n += convt(base << l, base << (l - 1)) + double(base << l, base << (l - 1));
    }
    n + base * unet::NUM_CLASSES + unet::NUM_CLASSES
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub probabilities: Plane<f32>,
    pub binary: Plane<u8>,
}

impl SegmentationMask {
    pub fn from_probabilities(probabilities: Plane<f32>, threshold: f64) -> Self {
        let binary = Plane {
            width: probabilities.width,
            height: probabilities.height,
            data: probabilities.data.iter().map(|&p| (p as f64 >= threshold) as u8).collect(),
        };
        Self { probabilities, binary }
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.binary.data.iter().map(|&v| v as f64).sum::<f64>() / self.binary.data.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLesion {
    pub lesion_id: LesionId,
    pub pixels: RgbImage,
    pub mask: SegmentationMask,
    pub policy: MaskingPolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegTrainLog {
    pub loss_per_epoch: Vec<f64>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

/// Foreground probability per pixel for a batch of `n × 3 × h × w` inputs.
fn foreground_probs(net: &CompactUNet, x: &Tensor) -> Vec<Plane<f32>> {
    let logits = net.forward(x);
    let hw = x.h * x.w;
    (0..x.n)
        .map(|i| {
            let s = logits.sample(i);
            let data = (0..hw).map(|j| 1.0 / (1.0 + (s[j] - s[hw + j]).exp())).collect();
            Plane { width: x.w, height: x.h, data }
        })
        .collect()
}

fn crops_tensor(crops: &[&RgbImage]) -> Tensor {
    let t: Vec<Tensor> = crops.iter().map(|c| c.to_tensor()).collect();
    Tensor::stack(&t.iter().collect::<Vec<_>>())
}

/// Pixel-wise two-class cross-entropy; returns mean loss and fills `dlogits`.
fn cross_entropy(logits: &Tensor, masks: &[&Plane<u8>], dlogits: &mut Tensor) -> f64 {
    let hw = logits.h * logits.w;
    let norm = (logits.n * hw) as f32;
    let mut loss = 0.0f64;
    for (i, m) in masks.iter().enumerate() {
        let s = logits.sample(i);
        let d = dlogits.sample_mut(i);
        for j in 0..hw {
            let (z0, z1) = (s[j], s[hw + j]);
            let mx = z0.max(z1);
            let lse = mx + ((z0 - mx).exp() + (z1 - mx).exp()).ln();
            let (p0, p1) = ((z0 - lse).exp(), (z1 - lse).exp());
            let fg = m.data[j] != 0;
            loss += (lse - if fg { z1 } else { z0 }) as f64;
            d[j] = (p0 - if fg { 0.0 } else { 1.0 }) / norm;
            d[hw + j] = (p1 - if fg { 1.0 } else { 0.0 }) / norm;
        }
    }
    loss / norm as f64
}

/// Train with Adam, a step-down schedule and paired augmentations.
/// Negatives are skin-only crops with all-background targets.
pub fn train_segmenter(
    mut model: SegmenterModel,
    positives: &[(RgbImage, Plane<u8>)],
    negatives: &[RgbImage],
    cfg: &SegmenterTrainConfig,
    seed: u64,
) -> Result<(SegmenterModel, SegTrainLog)> {
    let mut log = SegTrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    if positives.is_empty() {
        return Err(UdError::InvalidInput("segmenter training needs at least one (crop, mask) pair".into()));
    }
    if cfg.batch_size == 0 {
        return Err(UdError::Config("segmenter.training.batch_size must be positive".into()));
    }
    if negatives.is_empty() {
        let w = "no skin-only negative crops supplied; expect false-positive masks on lesion-free skin".to_string();
        log::warn!("{w}");
        log.warnings.push(w);
    }
    let start = Instant::now();
    let side = positives[0].0.width;
    let empty = Plane::new(side, side);
    let mut samples: Vec<(&RgbImage, &Plane<u8>)> = positives.iter().map(|(c, m)| (c, m)).collect();
    samples.extend(negatives.iter().map(|c| (c, &empty)));
    if samples.iter().any(|(c, m)| c.width != side || c.height != side || m.width != side || m.height != side) {
        return Err(UdError::InvalidInput("segmenter training crops and masks must share one square size".into()));
    }
    let schedule = StepDownSchedule {
        base_lr: cfg.learning_rate,
        milestones: cfg.schedule_milestones.clone(),
        gamma: cfg.schedule_gamma,
    };
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e6);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.lr = schedule.lr_at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<(RgbImage, Plane<u8>)> = chunk
                .iter()
                .map(|&i| augment::augment_pair(samples[i].0, samples[i].1, &cfg.augment, &mut rng))
                .collect();
            let x = crops_tensor(&pairs.iter().map(|(c, _)| c).collect::<Vec<_>>());
            model.net.zero_grad();
            let (logits, cache) = model.net.forward_train(&x);
            let mut d = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
            total += cross_entropy(&logits, &pairs.iter().map(|(_, m)| m).collect::<Vec<_>>(), &mut d) * chunk.len() as f64;
            model.net.backward(&cache, &d);
            adam.step(model.net.params_mut());
        }
        log.loss_per_epoch.push(total / samples.len() as f64);
    }
    model.trained = true;
    model.training_config = Some(cfg.clone());
    log.seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}

pub fn mask_iou(a: &Plane<u8>, b: &Plane<u8>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x != 0 && y != 0) as usize;
        union += (x != 0 || y != 0) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Threshold grid 0.05, 0.10, …, 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// Grid threshold maximizing mean IoU; ties resolved toward 0.5.
pub fn select_threshold_from_probs(probs: &[Plane<f32>], masks: &[Plane<u8>]) -> Result<f64> {
    if probs.is_empty() || probs.len() != masks.len() {
        return Err(UdError::InvalidInput("threshold selection needs a non-empty, aligned validation set".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for t in threshold_grid() {
        let miou = probs
            .iter()
            .zip(masks)
            .map(|(p, m)| mask_iou(&SegmentationMask::from_probabilities(p.clone(), t).binary, m))
            .sum::<f64>()
            / probs.len() as f64;
        let better = match best {
            None => true,
            Some((bt, bi)) => miou > bi + 1e-12 || ((miou - bi).abs() <= 1e-12 && (t - 0.5).abs() < (bt - 0.5).abs() - 1e-9),
        };
        if better {
            best = Some((t, miou));
        }
    }
    Ok(best.expect("grid non-empty").0)
}

pub fn select_threshold(model: &SegmenterModel, validation: &[(RgbImage, Plane<u8>)]) -> Result<f64> {
    if validation.is_empty() {
        return Err(UdError::InvalidInput("validation set is empty".into()));
    }
    let mut probs = Vec::with_capacity(validation.len());
    for chunk in validation.chunks(16) {
        probs.extend(foreground_probs(&model.net, &crops_tensor(&chunk.iter().map(|(c, _)| c).collect::<Vec<_>>())));
    }
    let masks: Vec<Plane<u8>> = validation.iter().map(|(_, m)| m.clone()).collect();
    select_threshold_from_probs(&probs, &masks)
}

pub fn segment(model: &SegmenterModel, crop: &LesionCrop) -> Result<SegmentationMask> {
    Ok(segment_all(model, std::slice::from_ref(&crop.pixels))?.remove(0))
}

pub fn segment_all(model: &SegmenterModel, crops: &[RgbImage]) -> Result<Vec<SegmentationMask>> {
    if !model.trained {
        return Err(UdError::Untrained("segmenter has not been trained or loaded".into()));
    }
    if crops.iter().any(|c| c.width % 16 != 0 || c.height % 16 != 0) {
        return Err(UdError::InvalidInput("segmenter crops must have sides divisible by 16".into()));
    }
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(16) {
        for p in foreground_probs(&model.net, &crops_tensor(&chunk.iter().collect::<Vec<_>>())) {
            out.push(SegmentationMask::from_probabilities(p, model.binary_threshold));
        }
    }
    Ok(out)
}

/// Keep foreground pixels; replace background per `policy`.
pub fn apply_mask(crop: &LesionCrop, mask: &SegmentationMask, policy: MaskingPolicy) -> Result<MaskedLesion> {
    let pixels = mask_pixels(&crop.pixels, &mask.binary, policy)?;
    Ok(MaskedLesion { lesion_id: crop.lesion_id, pixels, mask: mask.clone(), policy })
}

pub fn mask_pixels(img: &RgbImage, mask: &Plane<u8>, policy: MaskingPolicy) -> Result<RgbImage> {
    if img.width != mask.width || img.height != mask.height {
        return Err(UdError::InvalidInput("mask and crop sizes differ".into()));
    }
    let fill = match policy {
        MaskingPolicy::ZeroFill => [0u8; 3],
        MaskingPolicy::MeanSkinFill => {
            let (mut sum, mut n) = ([0u64; 3], 0u64);
            for (px, &m) in img.data.chunks_exact(3).zip(&mask.data) {
                if m == 0 {
                    for c in 0..3 {
                        sum[c] += px[c] as u64;
                    }
                    n += 1;
                }
            }
            let n = n.max(1) as f64;
            [0, 1, 2].map(|c| (sum[c] as f64 / n).round() as u8)
        }
    };
    let mut out = img.clone();
    for (px, &m) in out.data.chunks_exact_mut(3).zip(&mask.data) {
        if m == 0 {
            px.copy_from_slice(&fill);
        }
    }
    Ok(out)
}

impl SegmenterModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let side = SegmenterSidecar {
            base_channels: self.net.base_channels,
            trainable_param_count: self.trainable_param_count,
            binary_threshold: self.binary_threshold,
            masking_policy: self.masking_policy,
            training_config: self.training_config.clone(),
            format_version: CHECKPOINT_FORMAT_VERSION,
        };
        checkpoint::save(path, CHECKPOINT_KIND, &self.net.params(), &side)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: SegmenterSidecar = checkpoint::read_sidecar(path)?;
        if side.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(UdError::Checkpoint {
                path: path.to_owned(),
                reason: format!("format version {} not supported", side.format_version),
            });
        }
        let mut model = build_compact_unet(side.base_channels, 0)?;
        checkpoint::load_into(&mut model.net, checkpoint::read_weights(path, CHECKPOINT_KIND)?, path)?;
        model.binary_threshold = side.binary_threshold;
        model.masking_policy = side.masking_policy;
        model.training_config = side.training_config;
        model.trained = true;
        Ok(model)
    }
}

/// Exact-mask training pairs for every lesion of a synthetic patient, cropped
/// the same way the pipeline crops detections. Only the centered lesion is foreground.
pub fn lesion_pairs(image: &WideFieldImage, truth: &SynthGroundTruth, crop_size: usize) -> Vec<(RgbImage, Plane<u8>)> {
    let labels = truth.label_map(image.width(), image.height());
    truth
        .boxes
        .iter()
        .enumerate()
        .map(|(id, b)| {
            let crop = crop_lesion(image, b, crop_size, id as LesionId);
            let (x0, y0, side) = crop.window;
            let window = labels.window_reflect(x0, y0, side, side);
            let own = Plane {
                width: side,
                height: side,
                data: window.data.iter().map(|&v| (v as usize == id + 1) as u8).collect(),
            };
            let mask = if side == crop_size { own } else { own.resize_nearest(crop_size, crop_size) };
            (crop.pixels, mask)
        })
        .collect()
}

/// Random skin-only windows that touch no lesion pixel.
pub fn skin_negatives(
    image: &WideFieldImage,
    truth: &SynthGroundTruth,
    crop_size: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<RgbImage> {
    let (w, h) = (image.width(), image.height());
    if w < crop_size || h < crop_size {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 50 {
        if out.len() == count {
            break;
        }
        let x0 = rng.random_range(0..=w - crop_size) as f64;
        let y0 = rng.random_range(0..=h - crop_size) as f64;
        let window = BoundingBox::new(x0, y0, x0 + crop_size as f64, y0 + crop_size as f64, 1.0);
        let clear = truth.boxes.iter().all(|b| {
            b.x_max <= window.x_min || b.x_min >= window.x_max || b.y_max <= window.y_min || b.y_min >= window.y_max
        });
        if clear {
            out.push(image.pixels.window_reflect(x0 as isize, y0 as isize, crop_size, crop_size));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_budget_and_rejection() {
        let m = build_compact_unet(DEFAULT_BASE_CHANNELS, 0).unwrap();
        assert!((1_710_000..=2_020_000).contains(&m.trainable_param_count));
        assert_eq!(m.trainable_param_count, unet_param_count(3, 16));
        assert!(!m.net.has_normalization_layers());
        assert!(matches!(build_compact_unet(64, 0), Err(UdError::ParameterBudget { .. })));
        assert!((unet_param_count(3, 64) as f64 - 31e6).abs() < 0.05 * 31e6);
        assert_eq!(m.net.signature(), build_compact_unet(16, 0).unwrap().net.signature());
    }

    #[test]
    fn threshold_tie_breaks() {
        let mask = Plane { width: 4, height: 4, data: (0..16).map(|i| (i % 3 == 0) as u8).collect() };
        let exact = Plane { width: 4, height: 4, data: mask.data.iter().map(|&v| v as f32).collect() };
        assert_eq!(select_threshold_from_probs(&[exact], &[mask]).unwrap(), 0.5);
        let flat = Plane::filled(4, 4, 0.6f32);
        assert_eq!(select_threshold_from_probs(&[flat], &[Plane::filled(4, 4, 1u8)]).unwrap(), 0.5);
        assert!(select_threshold_from_probs(&[], &[]).is_err());
    }

    fn crop_of(img: RgbImage) -> LesionCrop {
        LesionCrop { lesion_id: 0, pixels: img, source_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0, 1.0), center: (0.0, 0.0), window: (0, 0, 64) }
    }

    #[test]
    fn masking_policies() {
        let img = RgbImage::from_fn(8, 8, |x, y| [x as u8 * 10, y as u8 * 10, 7]);
        let crop = crop_of(img.clone());
        let ones = SegmentationMask::from_probabilities(Plane::filled(8, 8, 1.0), 0.5);
        assert_eq!(apply_mask(&crop, &ones, MaskingPolicy::MeanSkinFill).unwrap().pixels, img);
        let zeros = SegmentationMask::from_probabilities(Plane::filled(8, 8, 0.0), 0.5);
        assert!(apply_mask(&crop, &zeros, MaskingPolicy::ZeroFill).unwrap().pixels.data.iter().all(|&v| v == 0));

        let half = SegmentationMask::from_probabilities(
            Plane { width: 8, height: 8, data: (0..64).map(|i| if i % 8 < 4 { 1.0 } else { 0.0 }).collect() },
            0.5,
        );
        let out = apply_mask(&crop, &half, MaskingPolicy::MeanSkinFill).unwrap().pixels;
        let bg: Vec<[u8; 3]> = (0..8).flat_map(|y| (4..8).map(move |x| (x, y))).map(|(x, y)| img.get(x, y)).collect();
        let mean = [0, 1, 2].map(|c| (bg.iter().map(|p| p[c] as f64).sum::<f64>() / bg.len() as f64).round() as u8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.get(x, y), if x < 4 { img.get(x, y) } else { mean });
            }
        }
        let once = apply_mask(&crop, &half, MaskingPolicy::ZeroFill).unwrap();
        let twice = apply_mask(&crop_of(once.pixels.clone()), &half, MaskingPolicy::ZeroFill).unwrap();
        assert_eq!(once.pixels, twice.pixels);
    }

    #[test]
    fn untrained_segment_rejected_and_zero_epochs_noop() {
        let m = build_compact_unet(16, 0).unwrap();
        assert!(matches!(segment(&m, &crop_of(RgbImage::filled(64, 64, [1, 2, 3]))), Err(UdError::Untrained(_))));
        let cfg = SegmenterTrainConfig { epochs: 0, ..SegmenterTrainConfig::default() };
        let before = m.net.signature();
        let (same, log) = train_segmenter(m, &[], &[], &cfg, 0).unwrap();
        assert_eq!(same.net.signature(), before);
        assert!(!same.trained && log.loss_per_epoch.is_empty());
    }

    #[test]
    fn missing_negatives_warns() {
        let m = build_compact_unet(16, 0).unwrap();
        let pair = (RgbImage::filled(64, 64, [200, 150, 120]), Plane::new(64, 64));
        let cfg = SegmenterTrainConfig { epochs: 1, ..SegmenterTrainConfig::default() };
        let (_, log) = train_segmenter(m, &[pair], &[], &cfg, 0).unwrap();
        assert_eq!(log.warnings.len(), 1);
    }
}
