//! Key-point detection scoring.
//!
//! Matching is channel-wise: each channel has at most one detection and at
//! most one ground-truth point. A detection within the pixel tolerance of its
//! ground truth is a true positive; a detection without ground truth is a
//! false positive; a detection beyond tolerance is both a false positive and
//! a false negative; an undetected ground truth is a false negative.
//!
//! Frame scores are averaged with equal weight per frame. Per-class and
//! per-key-point rows aggregate raw counts over all frames first.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heatmap::{DecodeParams, DetectionSet, FrameAnnotation, VolumeSummary};
use crate::pool_model::{canonical_channel_index, KeyPointClass, KeyPointId, NUM_KEYPOINTS};

pub const DEFAULT_TOLERANCE_PX: f64 = 5.0;

/// Best `beta` per pool type (6, 8 and 10 lanes) reported for the detector.
pub const REFERENCE_BETAS: [(u32, f64); 3] = [(6, 0.15), (8, 0.9), (10, 0.7)];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl std::ops::Add for MatchCounts {
    type Output = MatchCounts;

    fn add(self, o: MatchCounts) -> MatchCounts {
        MatchCounts {
            true_pos: self.true_pos + o.true_pos,
            false_pos: self.false_pos + o.false_pos,
            false_neg: self.false_neg + o.false_neg,
        }
    }
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: MatchCounts) {
        *self = *self + o;
    }
}

impl MatchCounts {
    /// Ground-truth points in scope.
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_neg
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &MatchCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_pos)
}

pub fn recall(c: &MatchCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_neg)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1(c: &MatchCounts) -> f64 {
    f1_from(precision(c), recall(c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    tolerance_px: f64,
    beta: f64,
}

impl EvalParams {
    pub fn new(tolerance_px: f64, beta: f64) -> Result<Self> {
        if !(tolerance_px > 0.0) {
            return Err(Error::validation("tolerance_px", format!("{tolerance_px} must be positive")));
        }
        DecodeParams::new(beta)?;
        Ok(Self { tolerance_px, beta })
    }

    pub fn tolerance_px(&self) -> f64 {
        self.tolerance_px
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams::new(self.beta).unwrap()
    }
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { tolerance_px: DEFAULT_TOLERANCE_PX, beta: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelOutcome {
    TruePositive { distance: f64 },
    /// Detection on a channel without ground truth.
    Spurious,
    /// Detection too far from its ground truth: counts as fp and fn.
    Mislocated { distance: f64 },
    Missed,
}

impl ChannelOutcome {
    pub fn counts(&self) -> MatchCounts {
        let (tp, fp, fneg) = match self {
            ChannelOutcome::TruePositive { .. } => (1, 0, 0),
            ChannelOutcome::Spurious => (0, 1, 0),
            ChannelOutcome::Mislocated { .. } => (0, 1, 1),
            ChannelOutcome::Missed => (0, 0, 1),
        };
        MatchCounts { true_pos: tp, false_pos: fp, false_neg: fneg }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub frame_id: String,
    /// Channels with a detection or a ground truth, in canonical order.
    pub outcomes: Vec<(KeyPointId, ChannelOutcome)>,
    pub counts: MatchCounts,
}

pub fn match_frame(det: &DetectionSet, gt: &FrameAnnotation, params: &EvalParams) -> Result<FrameMatch> {
    if (det.rows, det.cols) != (gt.rows, gt.cols) {
        return Err(Error::Shape(format!(
            "detections at {}x{} but ground truth at {}x{}",
            det.rows, det.cols, gt.rows, gt.cols
        )));
    }
    let mut detected = [None; NUM_KEYPOINTS];
    for d in &det.detections {
        detected[canonical_channel_index(d.id)] = Some((d.u, d.v));
    }
    let mut truth = [None; NUM_KEYPOINTS];
    for p in &gt.points {
        truth[canonical_channel_index(p.id)] = Some((p.u, p.v));
    }

    let mut outcomes = Vec::new();
    let mut counts = MatchCounts::default();
    for (k, id) in KeyPointId::all().enumerate() {
        let outcome = match (detected[k], truth[k]) {
            (None, None) => continue,
            (Some(_), None) => ChannelOutcome::Spurious,
            (None, Some(_)) => ChannelOutcome::Missed,
            (Some((du, dv)), Some((gu, gv))) => {
                let distance = (du - gu).hypot(dv - gv);
                if distance <= params.tolerance_px {
                    ChannelOutcome::TruePositive { distance }
                } else {
                    ChannelOutcome::Mislocated { distance }
                }
            }
        };
        counts += outcome.counts();
        outcomes.push((id, outcome));
    }
    Ok(FrameMatch { frame_id: gt.frame_id.clone(), outcomes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(c: &MatchCounts) -> Self {
        Scores { precision: precision(c), recall: recall(c), f1: f1(c) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameScore {
    pub frame_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One row of the per-class or per-key-point table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScopeScore {
    /// `None` when the scope has neither ground truth nor detections.
    #[serde(flatten)]
    pub scores: Option<Scores>,
    pub total: u64,
    #[serde(skip)]
    pub counts: MatchCounts,
}

impl ScopeScore {
    fn from_counts(counts: MatchCounts) -> Self {
        let absent = counts.total() == 0 && counts.false_pos == 0;
        ScopeScore { scores: (!absent).then(|| Scores::from_counts(&counts)), total: counts.total(), counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tolerance_px: f64,
    pub beta: f64,
    /// Sorted by frame id.
    pub per_frame: Vec<FrameScore>,
    pub per_class: BTreeMap<KeyPointClass, ScopeScore>,
    /// Keyed by `<class>_<index>`, in canonical channel order.
    #[serde(serialize_with = "serialize_keypoints")]
    pub per_keypoint: Vec<(KeyPointId, ScopeScore)>,
    pub mean_f1: f64,
}

fn serialize_keypoints<S: serde::Serializer>(rows: &[(KeyPointId, ScopeScore)], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(rows.len()))?;
    for (id, row) in rows {
        map.serialize_entry(&id.label(), row)?;
    }
    map.end()
}

pub fn evaluate(frames: &[(DetectionSet, FrameAnnotation)], params: &EvalParams) -> Result<EvalReport> {
    let mut seen = HashSet::new();
    for (det, gt) in frames {
        if det.frame_id != gt.frame_id {
            return Err(Error::Input(format!(
                "detections for `{}` paired with ground truth for `{}`",
                det.frame_id, gt.frame_id
            )));
        }
        if !seen.insert(gt.frame_id.as_str()) {
            return Err(Error::Input(format!("duplicate frame id `{}`", gt.frame_id)));
        }
    }

    let mut matches = frames
        .par_iter()
        .map(|(det, gt)| match_frame(det, gt, params))
        .collect::<Result<Vec<_>>>()?;
    matches.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    Ok(aggregate(&matches, params))
}

fn aggregate(matches: &[FrameMatch], params: &EvalParams) -> EvalReport {
    let per_frame: Vec<FrameScore> = matches
        .iter()
        .map(|m| {
            let s = Scores::from_counts(&m.counts);
            FrameScore { frame_id: m.frame_id.clone(), precision: s.precision, recall: s.recall, f1: s.f1 }
        })
        .collect();
    let mean_f1 = if per_frame.is_empty() {
        0.0
    } else {
        per_frame.iter().map(|f| f.f1).sum::<f64>() / per_frame.len() as f64
    };

    let mut by_id = [MatchCounts::default(); NUM_KEYPOINTS];
    for m in matches {
        for (id, outcome) in &m.outcomes {
            by_id[canonical_channel_index(*id)] += outcome.counts();
        }
    }
    let mut by_class: BTreeMap<KeyPointClass, MatchCounts> =
        KeyPointClass::ALL.into_iter().map(|c| (c, MatchCounts::default())).collect();
    for (id, counts) in KeyPointId::all().zip(by_id) {
        *by_class.get_mut(&id.class()).unwrap() += counts;
    }

    EvalReport {
        tolerance_px: params.tolerance_px,
        beta: params.beta,
        per_frame,
        per_class: by_class.into_iter().map(|(c, n)| (c, ScopeScore::from_counts(n))).collect(),
        per_keypoint: KeyPointId::all().zip(by_id).map(|(id, n)| (id, ScopeScore::from_counts(n))).collect(),
        mean_f1,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `class,index,precision,recall,f1,total`; the index column is empty.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,index,precision,recall,f1,total\n");
        for (class, row) in &self.per_class {
            push_csv_row(&mut out, class.name(), "", row);
        }
        out
    }

    pub fn per_keypoint_csv(&self) -> String {
        let mut out = String::from("class,index,precision,recall,f1,total\n");
        for (id, row) in &self.per_keypoint {
            push_csv_row(&mut out, id.class().name(), &id.index().to_string(), row);
        }
        out
    }
}

fn push_csv_row(out: &mut String, class: &str, index: &str, row: &ScopeScore) {
    match &row.scores {
        Some(s) => writeln!(out, "{class},{index},{:.6},{:.6},{:.6},{}", s.precision, s.recall, s.f1, row.total),
        None => writeln!(out, "{class},{index},-,-,-,{}", row.total),
    }
    .unwrap();
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub x: f64,
    pub mean_f1: f64,
    /// Total detections over all frames at this point.
    pub detections: usize,
}

/// A frame prepared for sweeping: decoding statistics plus ground truth.
#[derive(Debug, Clone)]
pub struct SweepFrame {
    pub summary: VolumeSummary,
    pub truth: FrameAnnotation,
}

/// Mean frame F1 as a function of `beta` at a fixed tolerance.
pub fn beta_sweep(frames: &[SweepFrame], grid: &[f64], tolerance_px: f64) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&beta| {
            let params = EvalParams::new(tolerance_px, beta)?;
            let pairs: Vec<_> = frames
                .iter()
                .map(|f| (f.summary.gate(&f.truth.frame_id, params.decode_params()), f.truth.clone()))
                .collect();
            let detections = pairs.iter().map(|(d, _)| d.detections.len()).sum();
            let report = evaluate(&pairs, &params)?;
            Ok(SweepPoint { x: beta, mean_f1: report.mean_f1, detections })
        })
        .collect()
}

/// Mean frame F1 as a function of the pixel tolerance; each frame is decoded
/// once with its own `beta` (e.g. per pool type).
pub fn tolerance_sweep(frames: &[(SweepFrame, f64)], grid: &[f64]) -> Result<Vec<SweepPoint>> {
    let pairs = frames
        .iter()
        .map(|(f, beta)| Ok((f.summary.gate(&f.truth.frame_id, DecodeParams::new(*beta)?), f.truth.clone())))
        .collect::<Result<Vec<_>>>()?;
    let detections = pairs.iter().map(|(d, _)| d.detections.len()).sum();
    grid.iter()
        .map(|&tolerance| {
            let report = evaluate(&pairs, &EvalParams::new(tolerance, 0.0)?)?;
            Ok(SweepPoint { x: tolerance, mean_f1: report.mean_f1, detections })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("x,mean_f1\n");
    for p in points {
        writeln!(out, "{},{:.6}", p.x, p.mean_f1).unwrap();
    }
    out
}

/// Parses `a:b:step` into an inclusive grid. The last point is `b` when the
/// step divides the range; otherwise the grid stops at the last point below `b`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::validation("grid", format!("`{spec}`: {m}"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad("expected numbers a:b:step")))
        .collect::<Result<_>>()?;
    let [start, end, step] = parts[..] else {
        return Err(bad("expected three fields a:b:step"));
    };
    if !(start.is_finite() && end.is_finite() && step.is_finite()) || step <= 0.0 || end < start {
        return Err(bad("need finite a <= b and step > 0"));
    }
    let steps = ((end - start) / step + 1e-9).floor() as usize;
    if steps > 1_000_000 {
        return Err(bad("too many grid points"));
    }
    Ok((0..=steps)
        .map(|k| {
            let x = start + k as f64 * step;
            // snap accumulated error onto the endpoint
            if (x - end).abs() < 1e-9 * step.max(1.0) {
                end
            } else {
                // rounding to 12 decimals keeps 0.05 * 3 printing as 0.15
                (x * 1e12).round() / 1e12
            }
        })
        .collect())
}
