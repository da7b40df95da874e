//! Ranking metrics (AP, RR, top-k agreement) and binary classification
//! metrics (accuracy, sensitivity, specificity; micro and macro) against
//! ground-truth ugly-duckling labels.
//!
//! Ranking metrics are undefined for patients without any UD; those patients
//! are excluded from MAP, MRR and top-k averages. Lesions absent from a label
//! map are treated as common by the per-ranking functions; [`evaluate_corpus`]
//! instead requires a label for every reported lesion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdError};
use crate::scoring::PatientReport;
use crate::synthgen::LesionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Ud,
    Common,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Ud => "ud",
            Label::Common => "common",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = UdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ud" => Ok(Label::Ud),
            "common" => Ok(Label::Common),
            other => Err(UdError::InvalidInput(format!("unknown label {other:?}; expected ud or common"))),
        }
    }
}

pub type Labels = BTreeMap<LesionId, Label>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patient_id: String,
    pub labels: Labels,
}

impl GroundTruth {
    pub fn ud_count(&self) -> usize {
        self.labels.values().filter(|l| **l == Label::Ud).count()
    }
}

fn is_ud(labels: &Labels, id: &LesionId) -> bool {
    labels.get(id) == Some(&Label::Ud)
}

fn has_ud(ranking: &[LesionId], labels: &Labels) -> bool {
    ranking.iter().any(|id| is_ud(labels, id))
}

/// Mean over UDs of precision at each UD's rank. `None` when the ranking has no UD.
pub fn average_precision(ranking: &[LesionId], labels: &Labels) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, id) in ranking.iter().enumerate() {
        if is_ud(labels, id) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// `1 / rank` of the highest-ranked UD.
pub fn reciprocal_rank(ranking: &[LesionId], labels: &Labels) -> Option<f64> {
    ranking.iter().position(|id| is_ud(labels, id)).map(|p| 1.0 / (p + 1) as f64)
}

/// How multiple UDs in one image combine into a single top-k success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopKSemantics {
    /// Success if at least one UD is ranked within the top k.
    #[default]
    Any,
    /// Success only if every UD is ranked within the top k.
    All,
}

impl FromStr for TopKSemantics {
    type Err = UdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Self::Any),
            "all" => Ok(Self::All),
            other => Err(UdError::Config(format!("unknown top-k semantics {other:?}; expected any or all"))),
        }
    }
}

/// 1 or 0 per the chosen semantics; `None` when the ranking has no UD.
pub fn topk_agreement(ranking: &[LesionId], labels: &Labels, k: usize, semantics: TopKSemantics) -> Option<u8> {
    if !has_ud(ranking, labels) {
        return None;
    }
    let mut within = ranking.iter().enumerate().filter(|(_, id)| is_ud(labels, id)).map(|(p, _)| p < k);
    let ok = match semantics {
        TopKSemantics::Any => within.any(|w| w),
        TopKSemantics::All => within.all(|w| w),
    };
    Some(ok as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_flags(flags: &BTreeMap<LesionId, bool>, labels: &Labels) -> Result<Self> {
        let mut c = Confusion::default();
        for (id, &predicted) in flags {
            let label = labels
                .get(id)
                .ok_or_else(|| UdError::Mismatch(format!("lesion {id} has a prediction but no label")))?;
            match (predicted, *label == Label::Ud) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        if let Some(id) = labels.keys().find(|id| !flags.contains_key(id)) {
            return Err(UdError::Mismatch(format!("lesion {id} has a label but no prediction")));
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.tp + self.tn) as f64 / self.total() as f64)
    }

    pub fn sensitivity(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let neg = self.tn + self.fp;
        (neg > 0).then(|| self.tn as f64 / neg as f64)
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Micro,
    Macro,
}

/// Rates are `None` when their denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Micro pools lesions across patients; macro averages per-patient rates,
/// skipping patients where a rate is undefined (no UD for sensitivity, no
/// common lesion for specificity).
pub fn binary_metrics(patients: &[(BTreeMap<LesionId, bool>, Labels)], scope: Scope) -> Result<BinaryMetrics> {
    if patients.iter().all(|(f, _)| f.is_empty()) {
        return Err(UdError::InvalidInput("binary metrics need at least one lesion".into()));
    }
    let confusions = patients
        .iter()
        .map(|(flags, labels)| Confusion::from_flags(flags, labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(match scope {
        Scope::Micro => {
            let mut pooled = Confusion::default();
            confusions.iter().for_each(|c| pooled.add(c));
            BinaryMetrics {
                accuracy: pooled.accuracy(),
                sensitivity: pooled.sensitivity(),
                specificity: pooled.specificity(),
            }
        }
        Scope::Macro => BinaryMetrics {
            accuracy: mean(confusions.iter().filter_map(Confusion::accuracy)),
            sensitivity: mean(confusions.iter().filter_map(Confusion::sensitivity)),
            specificity: mean(confusions.iter().filter_map(Confusion::specificity)),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub patients_total: usize,
    pub patients_with_ud: usize,
    pub lesions_total: usize,
    /// Patients with no common lesion, skipped by macro specificity.
    pub patients_without_common: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "map")]
    pub map_: Option<f64>,
    pub mrr: Option<f64>,
    pub top3_agreement: Option<f64>,
    pub top7_agreement: Option<f64>,
    pub topk_semantics: TopKSemantics,
    pub micro: BinaryMetrics,
    #[serde(rename = "macro")]
    pub macro_: BinaryMetrics,
    pub counts: EvalCounts,
}

/// Corpus-level metrics over matched `(report, truth)` pairs.
pub fn evaluate_corpus(
    reports: &[PatientReport],
    truths: &[GroundTruth],
    semantics: TopKSemantics,
) -> Result<EvalResult> {
    let by_id: BTreeMap<&str, &GroundTruth> = truths.iter().map(|t| (t.patient_id.as_str(), t)).collect();
    let report_ids: BTreeSet<&str> = reports.iter().map(|r| r.patient_id.as_str()).collect();
    let missing_truth: Vec<&str> = report_ids.iter().filter(|id| !by_id.contains_key(*id)).copied().collect();
    let missing_report: Vec<&str> = by_id.keys().filter(|id| !report_ids.contains(*id)).copied().collect();
    if !missing_truth.is_empty() || !missing_report.is_empty() {
        return Err(UdError::Mismatch(format!(
            "patients without ground truth: {missing_truth:?}; patients without report: {missing_report:?}"
        )));
    }

    let mut aps = Vec::new();
    let mut rrs = Vec::new();
    let mut top3 = Vec::new();
    let mut top7 = Vec::new();
    let mut binary = Vec::with_capacity(reports.len());
    let mut counts = EvalCounts { patients_total: reports.len(), ..EvalCounts::default() };
    for report in reports {
        let truth = by_id[report.patient_id.as_str()];
        let ranking = report.ranking();
        let mut labels = Labels::new();
        let mut flags = BTreeMap::new();
        for l in &report.lesions {
            let label = *truth.labels.get(&l.lesion_id).ok_or_else(|| {
                UdError::Mismatch(format!("patient {}: lesion {} has no label", report.patient_id, l.lesion_id))
            })?;
            labels.insert(l.lesion_id, label);
            flags.insert(l.lesion_id, l.is_ud);
        }
        counts.lesions_total += labels.len();
        if labels.values().any(|l| *l == Label::Ud) {
            counts.patients_with_ud += 1;
            aps.extend(average_precision(&ranking, &labels));
            rrs.extend(reciprocal_rank(&ranking, &labels));
            top3.extend(topk_agreement(&ranking, &labels, 3, semantics).map(f64::from));
            top7.extend(topk_agreement(&ranking, &labels, 7, semantics).map(f64::from));
        }
        if !labels.is_empty() && labels.values().all(|l| *l == Label::Ud) {
            counts.patients_without_common += 1;
        }
        binary.push((flags, labels));
    }
    let (micro, macro_) = if counts.lesions_total == 0 {
        (BinaryMetrics::default(), BinaryMetrics::default())
    } else {
        (binary_metrics(&binary, Scope::Micro)?, binary_metrics(&binary, Scope::Macro)?)
    };
    Ok(EvalResult {
        map_: mean(aps.into_iter()),
        mrr: mean(rrs.into_iter()),
        top3_agreement: mean(top3.into_iter()),
        top7_agreement: mean(top7.into_iter()),
        topk_semantics: semantics,
        micro,
        macro_,
        counts,
    })
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    patient_id: String,
    lesion_id: LesionId,
    label: String,
}

/// Parse a `patient_id,lesion_id,label` CSV (exact header required).
pub fn read_ground_truth_csv(path: &Path) -> Result<Vec<GroundTruth>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != ["patient_id", "lesion_id", "label"] {
        return Err(UdError::InvalidInput(format!(
            "{}: expected header patient_id,lesion_id,label, found {}",
            path.display(),
            header.join(",")
        )));
    }
    let mut out: BTreeMap<String, Labels> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: CsvRow = row?;
        let label: Label = row.label.parse()?;
        if out.entry(row.patient_id.clone()).or_default().insert(row.lesion_id, label).is_some() {
            return Err(UdError::InvalidInput(format!(
                "duplicate label for patient {} lesion {}",
                row.patient_id, row.lesion_id
            )));
        }
    }
    Ok(out.into_iter().map(|(patient_id, labels)| GroundTruth { patient_id, labels }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(uds: &[LesionId], n: LesionId) -> Labels {
        (0..n).map(|i| (i, if uds.contains(&i) { Label::Ud } else { Label::Common })).collect()
    }

    fn ranking(n: LesionId) -> Vec<LesionId> {
        (0..n).collect()
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&ranking(10), &labels(&[0], 10)), Some(1.0));
        assert_eq!(average_precision(&ranking(10), &labels(&[1], 10)), Some(0.5));
        let ap = average_precision(&ranking(5), &labels(&[0, 2], 5)).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&ranking(5), &labels(&[], 5)), None);
    }

    #[test]
    fn reciprocal_rank_examples() {
        assert_eq!(reciprocal_rank(&ranking(6), &labels(&[0], 6)), Some(1.0));
        assert_eq!(reciprocal_rank(&ranking(6), &labels(&[3, 5], 6)), Some(0.25));
        assert_eq!(reciprocal_rank(&ranking(6), &labels(&[], 6)), None);
    }

    #[test]
    fn topk_examples() {
        let r = ranking(10);
        assert_eq!(topk_agreement(&r, &labels(&[2], 10), 3, TopKSemantics::Any), Some(1));
        assert_eq!(topk_agreement(&r, &labels(&[3], 10), 3, TopKSemantics::Any), Some(0));
        let two = labels(&[1, 8], 10);
        assert_eq!(topk_agreement(&r, &two, 3, TopKSemantics::Any), Some(1));
        assert_eq!(topk_agreement(&r, &two, 3, TopKSemantics::All), Some(0));
        assert_eq!(topk_agreement(&r, &labels(&[], 10), 3, TopKSemantics::Any), None);
    }

    #[test]
    fn binary_examples() {
        let l = labels(&[4], 10);
        let perfect: BTreeMap<_, _> = l.iter().map(|(id, lab)| (*id, *lab == Label::Ud)).collect();
        let m = binary_metrics(&[(perfect, l.clone())], Scope::Micro).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (Some(1.0), Some(1.0), Some(1.0)));
        let none: BTreeMap<_, _> = l.keys().map(|id| (*id, false)).collect();
        let m = binary_metrics(&[(none, l)], Scope::Micro).unwrap();
        assert!((m.accuracy.unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(m.sensitivity, Some(0.0));
        assert_eq!(m.specificity, Some(1.0));
        assert!(binary_metrics(&[], Scope::Micro).is_err());
    }

    #[test]
    fn mismatched_ids_rejected() {
        let l = labels(&[0], 3);
        let flags: BTreeMap<_, _> = [(0, true), (1, false), (7, false)].into_iter().collect();
        assert!(matches!(binary_metrics(&[(flags, l)], Scope::Micro), Err(UdError::Mismatch(_))));
    }

    #[test]
    fn macro_differs_from_micro_under_partitioning() {
        // patient A: 1 UD caught among 2 lesions; patient B: 1 UD missed among 10
        let a_labels = labels(&[0], 2);
        let a_flags: BTreeMap<_, _> = [(0, true), (1, false)].into_iter().collect();
        let b_labels = labels(&[0], 10);
        let b_flags: BTreeMap<_, _> = (0..10).map(|i| (i, false)).collect();
        let split = vec![(a_flags, a_labels), (b_flags, b_labels)];
        let micro = binary_metrics(&split, Scope::Micro).unwrap();
        let macro_ = binary_metrics(&split, Scope::Macro).unwrap();
        assert!((micro.accuracy.unwrap() - 11.0 / 12.0).abs() < 1e-15);
        assert!((macro_.accuracy.unwrap() - (1.0 + 0.9) / 2.0).abs() < 1e-15);
        assert_eq!(micro.sensitivity, macro_.sensitivity);
        assert_ne!(micro.accuracy, macro_.accuracy);
    }

    #[test]
    fn label_parsing() {
        assert_eq!("ud".parse::<Label>().unwrap(), Label::Ud);
        assert!("UD?".parse::<Label>().is_err());
    }

    #[test]
    fn csv_requires_exact_header() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("gt.csv");
        std::fs::write(&good, "patient_id,lesion_id,label\np1,0,ud\np1,1,common\np2,0,common\n").unwrap();
        let truths = read_ground_truth_csv(&good).unwrap();
        assert_eq!(truths.len(), 2);
        assert_eq!(truths[0].labels[&0], Label::Ud);
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "patient,lesion_id,label\np1,0,ud\n").unwrap();
        assert!(read_ground_truth_csv(&bad).is_err());
    }
}
