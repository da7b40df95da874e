//! Per-patient outlier scoring: L2 distance of each embedding to the cohort
//! mean, the Eq. 1 threshold `mean + min(mean, std)`, ranking and UD flags.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdError};
use crate::synthgen::LesionId;
use crate::tiling::BoundingBox;
use crate::vae::LatentEmbedding;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSource {
    EmbeddingL2,
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceVector {
    pub patient_id: String,
    pub entries: Vec<(LesionId, f64)>,
    pub source: DistanceSource,
}

impl DistanceVector {
    pub fn new(patient_id: impl Into<String>, entries: Vec<(LesionId, f64)>, source: DistanceSource) -> Result<Self> {
        if let Some((id, d)) = entries.iter().find(|(_, d)| !d.is_finite() || *d < 0.0) {
            return Err(UdError::InvalidInput(format!("lesion {id}: distance {d} is not finite and non-negative")));
        }
        let ids: BTreeSet<_> = entries.iter().map(|(id, _)| *id).collect();
        if ids.len() != entries.len() {
            return Err(UdError::InvalidInput("duplicate lesion id in distance vector".into()));
        }
        Ok(Self { patient_id: patient_id.into(), entries, source })
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, d)| *d).collect()
    }
}

/// Distances of each `mu` to the centroid of all `mu`s.
pub fn embedding_distances(patient_id: &str, embeddings: &[LatentEmbedding]) -> Result<DistanceVector> {
    if embeddings.len() < 2 {
        return Err(UdError::InsufficientCohort { found: embeddings.len(), required: 2 });
    }
    let dim = embeddings[0].mu.len();
    if embeddings.iter().any(|e| e.mu.len() != dim) {
        return Err(UdError::InvalidInput("embeddings have unequal lengths".into()));
    }
    let mut centroid = vec![0.0f64; dim];
    for e in embeddings {
        for (c, v) in centroid.iter_mut().zip(&e.mu) {
            *c += *v as f64;
        }
    }
    let n = embeddings.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    let entries = embeddings
        .iter()
        .map(|e| {
            let sq: f64 = e.mu.iter().zip(&centroid).map(|(v, c)| (*v as f64 - c).powi(2)).sum();
            (e.lesion_id, sq.sqrt())
        })
        .collect();
    DistanceVector::new(patient_id, entries, DistanceSource::EmbeddingL2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    #[default]
    Population,
    Sample,
}

impl FromStr for StdMode {
    type Err = UdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" => Ok(Self::Population),
            "sample" => Ok(Self::Sample),
            other => Err(UdError::Config(format!("scoring.std_mode: unknown value {other:?}"))),
        }
    }
}

/// Mean and standard deviation. Sample mode with one value falls back to 0 spread.
pub fn mean_std(values: &[f64], mode: StdMode) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = match mode {
        StdMode::Population => n,
        StdMode::Sample => (n - 1.0).max(1.0),
    };
    (mean, (ss / denom).sqrt())
}

/// Eq. 1.
pub fn threshold_from_stats(mean: f64, std: f64) -> f64 {
    mean + mean.min(std)
}

pub fn compute_threshold(distances: &DistanceVector, mode: StdMode) -> Result<f64> {
    if distances.entries.is_empty() {
        return Err(UdError::InvalidInput("threshold needs at least one distance".into()));
    }
    let (mean, std) = mean_std(&distances.values(), mode);
    Ok(threshold_from_stats(mean, std))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionScore {
    pub lesion_id: LesionId,
    pub distance: f64,
    pub rank: usize,
    pub is_ud: bool,
}

/// Descending distance, ties by ascending lesion id. `is_ud` left false.
pub fn rank_lesions(distances: &DistanceVector) -> Vec<LesionScore> {
    let mut order = distances.entries.clone();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order
        .into_iter()
        .enumerate()
        .map(|(i, (lesion_id, distance))| LesionScore { lesion_id, distance, rank: i + 1, is_ud: false })
        .collect()
}

/// Strict `distance > threshold`.
pub fn classify(scores: &mut [LesionScore], threshold: f64) {
    for s in scores {
        s.is_ud = s.distance > threshold;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Scratch,
    #[default]
    Finetune,
    EmbedOnly,
}

impl PipelineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Scratch => "scratch",
            Self::Finetune => "finetune",
            Self::EmbedOnly => "embed_only",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = UdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Self::Scratch),
            "finetune" => Ok(Self::Finetune),
            "embed_only" => Ok(Self::EmbedOnly),
            other => Err(UdError::Config(format!(
                "pipeline.mode: unknown value {other:?}; expected scratch, finetune or embed_only"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Scored,
    NoLesions,
    InsufficientCohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLesion {
    pub lesion_id: LesionId,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub distance: Option<f64>,
    pub rank: Option<usize>,
    pub is_ud: bool,
}

/// Field order is the JSON order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub patient_id: String,
    pub mode: PipelineMode,
    pub status: ReportStatus,
    pub threshold: Option<f64>,
    pub mean_distance: Option<f64>,
    pub std_distance: Option<f64>,
    /// Sorted by rank when scored, by lesion id otherwise.
    pub lesions: Vec<ReportLesion>,
    pub format_version: u32,
}

impl PatientReport {
    /// Lesion ids from rank 1 downward.
    pub fn ranking(&self) -> Vec<LesionId> {
        let mut ranked: Vec<_> = self.lesions.iter().collect();
        ranked.sort_by_key(|l| (l.rank.unwrap_or(usize::MAX), l.lesion_id));
        ranked.into_iter().map(|l| l.lesion_id).collect()
    }

    pub fn ud_ids(&self) -> Vec<LesionId> {
        self.lesions.iter().filter(|l| l.is_ud).map(|l| l.lesion_id).collect()
    }

    /// Report for a patient with fewer than two lesions; no scoring is possible.
    pub fn unscored(patient_id: &str, boxes: &[(LesionId, BoundingBox)], mode: PipelineMode) -> Self {
        let mut lesions: Vec<_> = boxes
            .iter()
            .map(|(id, b)| ReportLesion { lesion_id: *id, bbox: b.coords(), distance: None, rank: None, is_ud: false })
            .collect();
        lesions.sort_by_key(|l| l.lesion_id);
        Self {
            patient_id: patient_id.to_owned(),
            mode,
            status: if boxes.is_empty() { ReportStatus::NoLesions } else { ReportStatus::InsufficientCohort },
            threshold: None,
            mean_distance: None,
            std_distance: None,
            lesions,
            format_version: REPORT_FORMAT_VERSION,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn build_report(
    patient_id: &str,
    boxes: &[(LesionId, BoundingBox)],
    distances: &DistanceVector,
    mode: PipelineMode,
    std_mode: StdMode,
) -> Result<PatientReport> {
    let box_ids: BTreeSet<_> = boxes.iter().map(|(id, _)| *id).collect();
    let dist_ids: BTreeSet<_> = distances.entries.iter().map(|(id, _)| *id).collect();
    if box_ids != dist_ids || box_ids.len() != boxes.len() {
        return Err(UdError::Mismatch(format!(
            "box ids {:?} differ from distance ids {:?}",
            box_ids.difference(&dist_ids).collect::<Vec<_>>(),
            dist_ids.difference(&box_ids).collect::<Vec<_>>()
        )));
    }
    if distances.entries.is_empty() {
        return Ok(PatientReport::unscored(patient_id, boxes, mode));
    }
    let (mean, std) = mean_std(&distances.values(), std_mode);
    let threshold = threshold_from_stats(mean, std);
    let mut scores = rank_lesions(distances);
    classify(&mut scores, threshold);
    let lesions = scores
        .iter()
        .map(|s| {
            let b = &boxes.iter().find(|(id, _)| *id == s.lesion_id).expect("ids checked").1;
            ReportLesion {
                lesion_id: s.lesion_id,
                bbox: b.coords(),
                distance: Some(s.distance),
                rank: Some(s.rank),
                is_ud: s.is_ud,
            }
        })
        .collect();
    Ok(PatientReport {
        patient_id: patient_id.to_owned(),
        mode,
        status: ReportStatus::Scored,
        threshold: Some(threshold),
        mean_distance: Some(mean),
        std_distance: Some(std),
        lesions,
        format_version: REPORT_FORMAT_VERSION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(values: &[f64]) -> DistanceVector {
        DistanceVector::new("p", values.iter().enumerate().map(|(i, d)| (i as LesionId, *d)).collect(), DistanceSource::EmbeddingL2)
            .unwrap()
    }

    fn emb(id: LesionId, mu: &[f32]) -> LatentEmbedding {
        LatentEmbedding { lesion_id: id, mu: mu.to_vec() }
    }

    #[test]
    fn fig5_threshold() {
        assert!((threshold_from_stats(21.60, 17.03) - 38.63).abs() < 0.005);
    }

    #[test]
    fn distances_to_centroid() {
        let e = [emb(0, &[0.0, 0.0]), emb(1, &[2.0, 0.0]), emb(2, &[4.0, 0.0])];
        let d = embedding_distances("p", &e).unwrap();
        assert_eq!(d.values(), vec![2.0, 0.0, 2.0]);
        let same = [emb(0, &[1.0, 3.0]), emb(1, &[1.0, 3.0])];
        assert_eq!(embedding_distances("p", &same).unwrap().values(), vec![0.0, 0.0]);
        assert!(matches!(embedding_distances("p", &e[..1]), Err(UdError::InsufficientCohort { .. })));
    }

    #[test]
    fn threshold_examples() {
        let t = compute_threshold(&dv(&[0.0, 0.0, 0.0, 10.0]), StdMode::Population).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
        let mut s = rank_lesions(&dv(&[0.0, 0.0, 0.0, 10.0]));
        classify(&mut s, t);
        assert_eq!(s.iter().filter(|x| x.is_ud).map(|x| x.lesion_id).collect::<Vec<_>>(), vec![3]);

        let flat = dv(&[3.0; 5]);
        let t = compute_threshold(&flat, StdMode::Population).unwrap();
        assert_eq!(t, 3.0);
        let mut s = rank_lesions(&flat);
        classify(&mut s, t);
        assert!(s.iter().all(|x| !x.is_ud));
    }

    #[test]
    fn ranking_and_ties() {
        let s = rank_lesions(&dv(&[5.0, 9.0, 1.0]));
        assert_eq!(s.iter().map(|x| (x.lesion_id, x.rank)).collect::<Vec<_>>(), vec![(1, 1), (0, 2), (2, 3)]);
        let s = rank_lesions(&dv(&[2.0; 4]));
        assert_eq!(s.iter().map(|x| x.lesion_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn strict_threshold() {
        let mut s = rank_lesions(&dv(&[1.0, 2.0]));
        classify(&mut s, 2.0);
        assert!(s.iter().all(|x| !x.is_ud));
    }

    #[test]
    fn report_round_trip_and_stats() {
        let boxes: Vec<_> = (0..3).map(|i| (i, BoundingBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 5.0, 5.0, 0.9))).collect();
        let d = dv(&[1.5, 7.25, 0.125]);
        let r = build_report("p", &boxes, &d, PipelineMode::Finetune, StdMode::Population).unwrap();
        let back = PatientReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let (m, s) = mean_std(&[1.5, 7.25, 0.125], StdMode::Population);
        assert!((r.mean_distance.unwrap() - m).abs() < 1e-9);
        assert!((r.std_distance.unwrap() - s).abs() < 1e-9);
        assert_eq!(r.ranking(), vec![1, 0, 2]);
    }

    #[test]
    fn report_id_mismatch() {
        let boxes = vec![(0, BoundingBox::new(0.0, 0.0, 5.0, 5.0, 1.0)), (5, BoundingBox::new(9.0, 0.0, 15.0, 5.0, 1.0))];
        assert!(matches!(
            build_report("p", &boxes, &dv(&[1.0, 2.0]), PipelineMode::Scratch, StdMode::Population),
            Err(UdError::Mismatch(_))
        ));
    }

    #[test]
    fn json_field_order() {
        let boxes = vec![(0, BoundingBox::new(0.0, 0.0, 5.0, 5.0, 1.0)), (1, BoundingBox::new(9.0, 0.0, 15.0, 5.0, 1.0))];
        let r = build_report("p", &boxes, &dv(&[1.0, 2.0]), PipelineMode::Finetune, StdMode::Population).unwrap();
        let json = r.to_json().unwrap();
        let keys = ["\"patient_id\"", "\"mode\"", "\"threshold\"", "\"mean_distance\"", "\"std_distance\"", "\"lesions\"", "\"format_version\""];
        let pos: Vec<_> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}
