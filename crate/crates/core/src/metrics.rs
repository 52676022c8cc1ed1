//! Detection scoring: IoU, greedy matching, precision/recall/F1 and average precision.
//!
//! Matching runs per (frame, class). Detections below the confidence threshold are
//! dropped; the rest are visited in descending confidence (ties: higher best-IoU first,
//! then input order) and each claims the unmatched truth with the highest IoU at or
//! above the IoU threshold (ties: lowest truth index). Unclaimed truths are false
//! negatives.
//!
//! AP integrates the all-points precision envelope over recall, with one PR point per
//! distinct confidence value.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::detect::Detection;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no ground truths present")]
    NoGroundTruth,
    #[error("invalid threshold {name}={value}: must lie in [0, 1]")]
    InvalidThreshold { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame_ref: String,
    pub class_id: u32,
    pub bbox: BBox,
}

/// Intersection over union. Symmetric, `1` for identical boxes, `0` for disjoint ones.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectionFlag {
    /// Dropped by the confidence threshold.
    Discarded,
    TruePositive { truth: usize, iou: f64 },
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub detections: Vec<DetectionFlag>,
    /// Index of the matching detection per truth; `None` is a false negative.
    pub truths: Vec<Option<usize>>,
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
}

impl MatchResult {
    pub fn counts(&self) -> MatchCounts {
        let mut c = MatchCounts::default();
        for d in &self.detections {
            match d {
                DetectionFlag::TruePositive { .. } => c.tp += 1,
                DetectionFlag::FalsePositive => c.fp += 1,
                DetectionFlag::Discarded => {}
            }
        }
        c.fn_ = self.truths.iter().filter(|t| t.is_none()).count() as u64;
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for MatchCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Greedy matching of one frame's detections against its truths (single class).
pub fn match_detections(
    detections: &[Scored],
    truths: &[BBox],
    iou_threshold: f64,
    confidence_threshold: f64,
) -> MatchResult {
    let best_iou: Vec<f64> = detections
        .iter()
        .map(|d| truths.iter().map(|t| iou(&d.bbox, t)).fold(0.0, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].confidence >= confidence_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .total_cmp(&detections[a].confidence)
            .then(best_iou[b].total_cmp(&best_iou[a]))
            .then(a.cmp(&b))
    });

    let mut flags = vec![DetectionFlag::Discarded; detections.len()];
    let mut owner: Vec<Option<usize>> = vec![None; truths.len()];
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truths.iter().enumerate() {
            if owner[ti].is_some() {
                continue;
            }
            let v = iou(&detections[di].bbox, t);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((ti, v));
            }
        }
        flags[di] = match best {
            Some((ti, v)) => {
                owner[ti] = Some(di);
                DetectionFlag::TruePositive { truth: ti, iou: v }
            }
            None => DetectionFlag::FalsePositive,
        };
    }
    MatchResult {
        detections: flags,
        truths: owner,
        iou_threshold,
        confidence_threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision is 1 with no predictions, recall is 1 with no truths.
pub fn precision_recall_f1(counts: MatchCounts) -> PrecisionRecallF1 {
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    PrecisionRecallF1 {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Per-detection outcome across a whole dataset, class-aware.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMatch {
    pub flags: Vec<DetectionFlag>,
    pub counts: MatchCounts,
    pub truths_per_class: BTreeMap<u32, u64>,
}

pub fn match_dataset(
    detections: &[Detection],
    truths: &[GroundTruth],
    iou_threshold: f64,
    confidence_threshold: f64,
) -> DatasetMatch {
    let mut groups: BTreeMap<(&str, u32), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        groups
            .entry((d.frame_ref.as_str(), d.class_id))
            .or_default()
            .0
            .push(i);
    }
    let mut truths_per_class = BTreeMap::new();
    for (i, t) in truths.iter().enumerate() {
        groups
            .entry((t.frame_ref.as_str(), t.class_id))
            .or_default()
            .1
            .push(i);
        *truths_per_class.entry(t.class_id).or_insert(0) += 1;
    }

    let mut flags = vec![DetectionFlag::Discarded; detections.len()];
    let mut counts = MatchCounts::default();
    for (det_idx, truth_idx) in groups.values() {
        let scored: Vec<Scored> = det_idx
            .iter()
            .map(|&i| Scored {
                bbox: detections[i].bbox,
                confidence: detections[i].confidence,
            })
            .collect();
        let boxes: Vec<BBox> = truth_idx.iter().map(|&i| truths[i].bbox).collect();
        let m = match_detections(&scored, &boxes, iou_threshold, confidence_threshold);
        counts += m.counts();
        for (local, flag) in m.detections.into_iter().enumerate() {
            flags[det_idx[local]] = match flag {
                DetectionFlag::TruePositive { truth, iou } => DetectionFlag::TruePositive {
                    truth: truth_idx[truth],
                    iou,
                },
                other => other,
            };
        }
    }
    DatasetMatch {
        flags,
        counts,
        truths_per_class,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct confidence, highest first: precision and recall of the set of
/// detections scoring at least that confidence.
fn pr_points(outcomes: &mut [(f64, bool)], n_truths: u64) -> Vec<PrPoint> {
    outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0u64, 0u64);
    for (i, &(conf, is_tp)) in outcomes.iter().enumerate() {
        seen += 1;
        tp += u64::from(is_tp);
        let group_ends = outcomes.get(i + 1).is_none_or(|next| next.0 != conf);
        if group_ends {
            points.push(PrPoint {
                confidence: conf,
                precision: tp as f64 / seen as f64,
                recall: if n_truths == 0 { 0.0 } else { tp as f64 / n_truths as f64 },
            });
        }
    }
    points
}

/// Area under the monotone precision envelope of a recall-sorted PR curve.
fn envelope_area(points: &[PrPoint]) -> f64 {
    let mut env: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in points.iter().zip(&env) {
        area += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    area
}

fn outcomes_for(
    detections: &[Detection],
    flags: &[DetectionFlag],
    class: Option<u32>,
) -> Vec<(f64, bool)> {
    detections
        .iter()
        .zip(flags)
        .filter(|(d, _)| class.is_none_or(|c| d.class_id == c))
        .filter(|(_, f)| !matches!(f, DetectionFlag::Discarded))
        .map(|(d, f)| (d.confidence, matches!(f, DetectionFlag::TruePositive { .. })))
        .collect()
}

/// All-points AP for one class. Detections of other classes are ignored.
pub fn average_precision(
    detections: &[Detection],
    truths: &[GroundTruth],
    class_id: u32,
    iou_threshold: f64,
) -> Result<f64, MetricsError> {
    let n_truths = truths.iter().filter(|t| t.class_id == class_id).count() as u64;
    if n_truths == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let m = match_dataset(detections, truths, iou_threshold, 0.0);
    let mut outcomes = outcomes_for(detections, &m.flags, Some(class_id));
    Ok(envelope_area(&pr_points(&mut outcomes, n_truths)))
}

/// PR curve pooled over all classes.
pub fn pr_curve(
    detections: &[Detection],
    truths: &[GroundTruth],
    iou_threshold: f64,
) -> Vec<PrPoint> {
    let m = match_dataset(detections, truths, iou_threshold, 0.0);
    let mut outcomes = outcomes_for(detections, &m.flags, None);
    pr_points(&mut outcomes, truths.len() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, value) in [
            ("iou_threshold", self.iou_threshold),
            ("confidence_threshold", self.confidence_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(MetricsError::InvalidThreshold { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// AP per ground-truth class.
    pub ap: BTreeMap<u32, f64>,
    pub map: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
    pub n_detections: u64,
    pub n_ground_truths: u64,
}

/// Single-point P/R/F1 at the confidence threshold plus per-class AP and mAP.
pub fn evaluate(
    detections: &[Detection],
    truths: &[GroundTruth],
    params: &EvalParams,
) -> Result<EvalReport, MetricsError> {
    params.validate()?;
    if truths.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let m = match_dataset(
        detections,
        truths,
        params.iou_threshold,
        params.confidence_threshold,
    );
    let prf = precision_recall_f1(m.counts);
    let classes: BTreeSet<u32> = truths.iter().map(|t| t.class_id).collect();
    let mut ap = BTreeMap::new();
    for &c in &classes {
        ap.insert(c, average_precision(detections, truths, c, params.iou_threshold)?);
    }
    let map = ap.values().sum::<f64>() / ap.len() as f64;
    Ok(EvalReport {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        ap,
        map,
        tp: m.counts.tp,
        fp: m.counts.fp,
        fn_: m.counts.fn_,
        iou_threshold: params.iou_threshold,
        confidence_threshold: params.confidence_threshold,
        n_detections: detections.len() as u64,
        n_ground_truths: truths.len() as u64,
    })
}

pub fn write_pr_csv<W: Write>(points: &[PrPoint], sink: W) -> io::Result<()> {
    let mut out = io::BufWriter::new(sink);
    writeln!(out, "confidence,precision,recall")?;
    for p in points {
        writeln!(out, "{},{},{}", p.confidence, p.precision, p.recall)?;
    }
    out.flush()
}
