//! Seeded synthetic patients: skin-toned backgrounds with one patient-specific
//! population of common lesions plus parameter-shifted outliers, and the exact
//! ground truth (boxes, masks, labels) needed to check every downstream stage.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UdError};
use crate::evalmetrics::{GroundTruth, Label};
use crate::image::{Plane, RgbImage, WideFieldImage};
use crate::tiling::BoundingBox;

/// Lesion identifier, unique within one patient.
pub type LesionId = u32;

/// How far outliers are pushed away from the patient's common-lesion population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierShift {
    /// Darkening/reddening magnitude in 8-bit units.
    pub color_delta: f64,
    /// Multiplier on the patient's mean lesion diameter.
    pub size_factor: f64,
    /// Added border irregularity (relative radial modulation).
    pub irregularity: f64,
}

impl Default for OutlierShift {
    fn default() -> Self {
        Self { color_delta: 55.0, size_factor: 1.8, irregularity: 0.3 }
    }
}

impl OutlierShift {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            color_delta: self.color_delta * k,
            size_factor: 1.0 + (self.size_factor - 1.0) * k,
            irregularity: self.irregularity * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// `(width, height)`
    pub image_size: (usize, usize),
    pub n_common: usize,
    pub n_outliers: usize,
    /// Allowed lesion diameters `[min, max]` in pixels.
    pub lesion_diameter_px: (f64, f64),
    pub outlier_shift: OutlierShift,
    /// Per-pixel Gaussian noise sigma in 8-bit units.
    pub skin_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: (1640, 1116),
            n_common: 60,
            n_outliers: 1,
            lesion_diameter_px: (8.0, 60.0),
            outlier_shift: OutlierShift::default(),
            skin_noise: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            return Err(UdError::Config("synthetic image size must be non-zero".into()));
        }
        if self.n_common < 2 {
            return Err(UdError::Config("n_common must be at least 2".into()));
        }
        let (lo, hi) = self.lesion_diameter_px;
        if !(lo >= 1.0 && lo <= hi) {
            return Err(UdError::Config(format!("invalid lesion diameter range [{lo}, {hi}]")));
        }
        if self.outlier_shift.size_factor <= 0.0 || self.outlier_shift.irregularity < 0.0 {
            return Err(UdError::Config("outlier_shift size_factor must be > 0, irregularity >= 0".into()));
        }
        Ok(())
    }
}

/// Generative parameters of one planted lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionParams {
    pub center: (f64, f64),
    /// Major-axis diameter in pixels.
    pub diameter: f64,
    /// Minor/major axis ratio.
    pub aspect: f64,
    pub angle: f64,
    pub color: [f64; 3],
    pub irregularity: f64,
    /// `(harmonic, relative amplitude, phase)` of the radial border modulation.
    pub harmonics: Vec<(u32, f64, f64)>,
    pub is_outlier: bool,
}

impl LesionParams {
    fn half_axis(&self) -> f64 {
        self.diameter / 2.0
    }

    /// Conservative pixel radius enclosing the rendered lesion.
    fn extent(&self) -> f64 {
        self.half_axis() * (1.0 + self.irregularity) + 2.0
    }

    /// Feature vector used to measure separability in parameter space.
    pub fn feature(&self) -> [f64; 5] {
        [self.color[0], self.color[1], self.color[2], self.diameter, 100.0 * self.irregularity]
    }

    fn border_radius(&self, theta: f64) -> f64 {
        1.0 + self.harmonics.iter().map(|&(k, a, p)| a * (k as f64 * theta + p).cos()).sum::<f64>()
    }
}

/// Exact binary mask of one lesion, stored over its bounding rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMask {
    pub x0: usize,
    pub y0: usize,
    pub mask: Plane<u8>,
}

impl LesionMask {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.mask.width
            && y < self.y0 + self.mask.height
            && self.mask.get(x - self.x0, y - self.y0) != 0
    }

    pub fn area(&self) -> usize {
        self.mask.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    pub patient_id: String,
    /// Indexed by lesion id.
    pub boxes: Vec<BoundingBox>,
    pub masks: Vec<LesionMask>,
    pub labels: BTreeMap<LesionId, Label>,
    pub params: Vec<LesionParams>,
}

impl SynthGroundTruth {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth { patient_id: self.patient_id.clone(), labels: self.labels.clone() }
    }

    pub fn outlier_ids(&self) -> Vec<LesionId> {
        self.labels.iter().filter(|(_, l)| **l == Label::Ud).map(|(id, _)| *id).collect()
    }

    /// Full-image label raster: 0 for background, `lesion_id + 1` inside a lesion.
    pub fn label_map(&self, width: usize, height: usize) -> Plane<u16> {
        let mut out = Plane::new(width, height);
        for (id, m) in self.masks.iter().enumerate() {
            for y in 0..m.mask.height {
                for x in 0..m.mask.width {
                    if m.mask.get(x, y) != 0 {
                        out.set(m.x0 + x, m.y0 + y, id as u16 + 1);
                    }
                }
            }
        }
        out
    }
}

pub fn patient_id_for_seed(seed: u64) -> String {
    format!("synth_{seed:06}")
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Smooth low-frequency skin field: base tone, linear gradient and broad bumps.
struct SkinField {
    base: [f64; 3],
    gradient: (f64, f64),
    bumps: Vec<(f64, f64, f64, f64)>,
    width: f64,
    height: f64,
}

impl SkinField {
    fn sample(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Self {
        let tone = rng.random_range(0.0..1.0);
        let mut base = lerp3([232.0, 194.0, 170.0], [168.0, 118.0, 90.0], tone);
        base[0] += rng.random_range(-4.0..4.0);
        let gradient = (rng.random_range(-14.0..14.0), rng.random_range(-14.0..14.0));
        let scale = width.max(height) as f64;
        let bumps = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.0..width as f64),
                    rng.random_range(0.0..height as f64),
                    rng.random_range(0.15..0.35) * scale,
                    rng.random_range(-9.0..9.0),
                )
            })
            .collect();
        Self { base, gradient, bumps, width: width as f64, height: height as f64 }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut shift = self.gradient.0 * (x / self.width - 0.5) + self.gradient.1 * (y / self.height - 0.5);
        for &(cx, cy, s, a) in &self.bumps {
            let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s);
            shift += a * (-d2).exp();
        }
        [self.base[0] + shift, self.base[1] + shift * 0.9, self.base[2] + shift * 0.8]
    }
}

fn harmonics(rng: &mut ChaCha8Rng, irregularity: f64) -> Vec<(u32, f64, f64)> {
    if irregularity <= 0.0 {
        return Vec::new();
    }
    let ks = [2u32, 3, 4, 5];
    let weights: Vec<f64> = ks.iter().map(|_| rng.random_range(0.3..1.0)).collect();
    let total: f64 = weights.iter().sum();
    ks.iter()
        .zip(weights)
        .map(|(&k, w)| (k, irregularity * w / total, rng.random_range(0.0..2.0 * PI)))
        .collect()
}

/// Generate one synthetic patient image with its ground truth.
pub fn generate_patient(config: &SynthConfig) -> Result<(WideFieldImage, SynthGroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (width, height) = config.image_size;
    let skin = SkinField::sample(&mut rng, width, height);

    // patient-specific common-lesion population
    let darkness = rng.random_range(0.42..0.62);
    let mean_color = [
        skin.base[0] * darkness * 1.05,
        skin.base[1] * darkness * 0.9,
        skin.base[2] * darkness * 0.85,
    ];
    let (d_lo, d_hi) = config.lesion_diameter_px;
    let mean_diameter = rng.random_range(14f64.ln()..28f64.ln()).exp().clamp(d_lo, d_hi);
    let shade = Normal::new(0.0, 6.0).expect("valid sigma");
    let tint = Normal::new(0.0, 3.0).expect("valid sigma");
    let size_jitter = Normal::new(0.0f64, 0.15).expect("valid sigma");

    let shift = config.outlier_shift;
    let mut specs = Vec::with_capacity(config.n_common + config.n_outliers);
    for i in 0..config.n_common + config.n_outliers {
        let is_outlier = i >= config.n_common;
        let common_shade = shade.sample(&mut rng);
        let mut color = [0.0; 3];
        for (c, v) in color.iter_mut().enumerate() {
            *v = mean_color[c] + common_shade + tint.sample(&mut rng);
        }
        let mut diameter = mean_diameter * size_jitter.sample(&mut rng).exp();
        let mut irregularity = 0.03;
        if is_outlier {
            let delta = [-0.25, -0.75, -0.6];
            for c in 0..3 {
                color[c] += shift.color_delta * delta[c];
            }
            diameter *= shift.size_factor;
            irregularity += shift.irregularity;
        }
        for v in &mut color {
            *v = v.clamp(0.0, 255.0);
        }
        let diameter = diameter.clamp(d_lo, d_hi);
        specs.push(LesionParams {
            center: (0.0, 0.0),
            diameter,
            aspect: rng.random_range(0.8..1.0),
            angle: rng.random_range(0.0..PI),
            color,
            irregularity,
            harmonics: harmonics(&mut rng, irregularity),
            is_outlier,
        });
    }
    specs.shuffle(&mut rng);

    // rejection placement of non-overlapping bounding squares
    const GAP: f64 = 6.0;
    const BORDER: f64 = 4.0;
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(specs.len());
    for spec in &mut specs {
        let r = spec.extent();
        if 2.0 * (r + BORDER) > width as f64 || 2.0 * (r + BORDER) > height as f64 {
            return Err(UdError::InvalidInput(format!(
                "lesion of extent {r:.1}px does not fit in a {width}x{height} image; use a larger image"
            )));
        }
        let mut ok = false;
        for _ in 0..5000 {
            let cx = rng.random_range(r + BORDER..width as f64 - r - BORDER);
            let cy = rng.random_range(r + BORDER..height as f64 - r - BORDER);
            let clear = placed.iter().all(|&(px, py, pr)| {
                (px - cx).abs() >= pr + r + GAP || (py - cy).abs() >= pr + r + GAP
            });
            if clear {
                spec.center = (cx, cy);
                placed.push((cx, cy, r));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(UdError::InvalidInput(format!(
                "{} lesions are too dense to place without overlap in a {width}x{height} image; use a larger image",
                specs_len(config)
            )));
        }
    }

    // render
    let mut field = vec![[0.0f64; 3]; width * height];
    for y in 0..height {
        for x in 0..width {
            field[y * width + x] = skin.at(x as f64, y as f64);
        }
    }
    let mut boxes = Vec::with_capacity(specs.len());
    let mut masks = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (mask, bbox) = render_lesion(spec, &mut field, width, height);
        masks.push(mask);
        boxes.push(bbox);
    }
    let noise = Normal::new(0.0, config.skin_noise.max(1e-9)).expect("valid sigma");
    let mut pixels = RgbImage::new(width, height);
    for (i, px) in field.iter().enumerate() {
        for c in 0..3 {
            let n = if config.skin_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.data[i * 3 + c] = (px[c] + n).round().clamp(0.0, 255.0) as u8;
        }
    }

    let labels = specs
        .iter()
        .enumerate()
        .map(|(i, s)| (i as LesionId, if s.is_outlier { Label::Ud } else { Label::Common }))
        .collect();
    let patient_id = patient_id_for_seed(config.seed);
    let mut image = WideFieldImage::new(pixels, patient_id.clone())?;
    image.source_path = format!("synthetic:{}", config.seed);
    Ok((image, SynthGroundTruth { patient_id, boxes, masks, labels, params: specs }))
}

fn specs_len(config: &SynthConfig) -> usize {
    config.n_common + config.n_outliers
}

/// Draw one lesion into `field` in place; returns its exact mask and tight box.
fn render_lesion(spec: &LesionParams, field: &mut [[f64; 3]], width: usize, height: usize) -> (LesionMask, BoundingBox) {
    let r = spec.extent();
    let (cx, cy) = spec.center;
    let x_lo = (cx - r).floor().max(0.0) as usize;
    let y_lo = (cy - r).floor().max(0.0) as usize;
    let x_hi = ((cx + r).ceil() as usize).min(width - 1);
    let y_hi = ((cy + r).ceil() as usize).min(height - 1);
    let a = spec.half_axis();
    let b = a * spec.aspect;
    let (sin, cos) = spec.angle.sin_cos();
    let mut inside = Vec::new();
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let rho = (u * u + v * v).sqrt();
            let boundary = spec.border_radius(v.atan2(u));
            // approximate signed distance to the border in pixels
            let sd = (rho - boundary) * b;
            let alpha = (0.5 - sd / 1.5).clamp(0.0, 1.0);
            if alpha <= 0.0 {
                continue;
            }
            let depth = (1.0 - rho / boundary).clamp(0.0, 1.0);
            let px = &mut field[y * width + x];
            for c in 0..3 {
                let lesion = spec.color[c] * (1.0 - 0.1 * depth);
                px[c] = px[c] * (1.0 - 0.95 * alpha) + lesion * 0.95 * alpha;
            }
            if alpha >= 0.5 {
                inside.push((x, y));
            }
        }
    }
    let mx0 = inside.iter().map(|p| p.0).min().unwrap_or(cx as usize);
    let my0 = inside.iter().map(|p| p.1).min().unwrap_or(cy as usize);
    let mx1 = inside.iter().map(|p| p.0).max().unwrap_or(cx as usize);
    let my1 = inside.iter().map(|p| p.1).max().unwrap_or(cy as usize);
    let mut mask = Plane::new(mx1 - mx0 + 1, my1 - my0 + 1);
    for &(x, y) in &inside {
        mask.set(x - mx0, y - my0, 1);
    }
    let bbox = BoundingBox::new(mx0 as f64, my0 as f64, (mx1 + 1) as f64, (my1 + 1) as f64, 1.0);
    (LesionMask { x0: mx0, y0: my0, mask }, bbox)
}

/// Per-patient sampling rules for a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTemplate {
    pub base: SynthConfig,
    /// Common-lesion count range, sampled log-uniformly.
    pub n_common_range: (usize, usize),
    /// Relative weights for 1, 2, 3, ... outliers in patients that have any.
    pub outlier_count_weights: Vec<f64>,
    /// Fraction of patients with no outliers at all.
    pub ud_free_fraction: f64,
}

impl Default for CorpusTemplate {
    fn default() -> Self {
        Self {
            base: SynthConfig::default(),
            n_common_range: (10, 182),
            // mean 1.44 outliers per affected patient
            outlier_count_weights: vec![0.6, 0.36, 0.04],
            ud_free_fraction: 22.0 / 75.0,
        }
    }
}

/// Generate `n_patients` patients with seeds `base_seed + index`. Exactly
/// `round(ud_free_fraction · n)` patients, chosen by a seeded shuffle, get no outliers.
pub fn generate_corpus(
    n_patients: usize,
    base_seed: u64,
    template: &CorpusTemplate,
) -> Result<Vec<(WideFieldImage, SynthGroundTruth)>> {
    let configs = corpus_configs(n_patients, base_seed, template)?;
    configs.iter().map(generate_patient).collect()
}

/// The per-patient configurations [`generate_corpus`] renders.
pub fn corpus_configs(n_patients: usize, base_seed: u64, template: &CorpusTemplate) -> Result<Vec<SynthConfig>> {
    if n_patients == 0 {
        return Err(UdError::InvalidInput("corpus needs at least one patient".into()));
    }
    if !(0.0..=1.0).contains(&template.ud_free_fraction) {
        return Err(UdError::Config("ud_free_fraction must lie in [0, 1]".into()));
    }
    let (lo, hi) = template.n_common_range;
    if lo < 2 || lo > hi {
        return Err(UdError::Config(format!("invalid n_common_range [{lo}, {hi}]")));
    }
    let mut order: Vec<usize> = (0..n_patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(base_seed ^ 0x5eed_c0de));
    let n_free = (template.ud_free_fraction * n_patients as f64).round() as usize;
    let mut ud_free = vec![false; n_patients];
    for &i in order.iter().take(n_free) {
        ud_free[i] = true;
    }
    let total_weight: f64 = template.outlier_count_weights.iter().sum();
    (0..n_patients)
        .map(|i| {
            let seed = base_seed + i as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xC0FFEE);
            let n_common = if lo == hi {
                lo
            } else {
                (rng.random_range((lo as f64).ln()..((hi + 1) as f64).ln()).exp().floor() as usize).clamp(lo, hi)
            };
            let n_outliers = if ud_free[i] || total_weight <= 0.0 {
                0
            } else {
                let mut pick = rng.random_range(0.0..total_weight);
                let mut k = template.outlier_count_weights.len();
                for (j, w) in template.outlier_count_weights.iter().enumerate() {
                    if pick < *w {
                        k = j + 1;
                        break;
                    }
                    pick -= w;
                }
                k
            };
            Ok(SynthConfig { seed, n_common, n_outliers, ..template.base.clone() })
        })
        .collect()
}

/// Write `<pid>.png`, `<pid>_masks.png` (16-bit label map) and `<pid>_truth.json`.
pub fn save_patient(dir: &Path, image: &WideFieldImage, truth: &SynthGroundTruth) -> Result<()> {
    fs::create_dir_all(dir)?;
    let pid = &truth.patient_id;
    image.pixels.save_png(&dir.join(format!("{pid}.png")))?;
    let labels = truth.label_map(image.width(), image.height());
    let buf = ::image::ImageBuffer::<::image::Luma<u16>, Vec<u16>>::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.data,
    )
    .ok_or_else(|| UdError::InvalidInput("label map size mismatch".into()))?;
    buf.save(dir.join(format!("{pid}_masks.png")))?;
    fs::write(dir.join(format!("{pid}_truth.json")), serde_json::to_vec_pretty(truth)?)?;
    Ok(())
}

/// Patient ids with a `<pid>_truth.json` in `dir`, sorted.
pub fn list_patients(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_truth.json")).map(str::to_owned))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Inverse of [`save_patient`].
pub fn load_patient(dir: &Path, patient_id: &str) -> Result<(WideFieldImage, SynthGroundTruth)> {
    let truth: SynthGroundTruth = serde_json::from_slice(&fs::read(dir.join(format!("{patient_id}_truth.json")))?)?;
    let mut image = WideFieldImage::load(&dir.join(format!("{patient_id}.png")))?;
    image.patient_id = truth.patient_id.clone();
    Ok((image, truth))
}

/// Write the `patient_id,lesion_id,label` ground-truth CSV.
pub fn write_ground_truth_csv(path: &Path, truths: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "lesion_id", "label"])?;
    for t in truths {
        for (id, label) in &t.labels {
            w.write_record([t.patient_id.as_str(), &id.to_string(), label.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}
