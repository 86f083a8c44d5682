//! Detection-to-truth matching, the four F1 metrics, and the threshold search.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    apply_adaptive_thresholds, is_near_shore, ClassId, Detection, ThresholdTable, PIXEL_SPACING_M,
};

pub const DEFAULT_RADIUS_M: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    pub fn name(self) -> &'static str {
        match self {
            Confidence::High => "HIGH",
            Confidence::Medium => "MEDIUM",
            Confidence::Low => "LOW",
        }
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Confidence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HIGH" => Ok(Confidence::High),
            "MEDIUM" => Ok(Confidence::Medium),
            "LOW" => Ok(Confidence::Low),
            _ => Err(Error::Domain(format!("unknown confidence `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthLabel {
    pub scene_id: String,
    pub row: f64,
    pub col: f64,
    pub is_vessel: Option<bool>,
    pub is_fishing: Option<bool>,
    pub confidence: Confidence,
    pub distance_from_shore_km: f64,
}

impl GroundTruthLabel {
    pub fn validate(&self) -> Result<()> {
        if self.is_fishing.is_some() && self.is_vessel != Some(true) {
            return Err(Error::Domain(format!(
                "label at ({}, {}) has is_fishing without is_vessel = true",
                self.row, self.col
            )));
        }
        if !(self.row.is_finite() && self.col.is_finite()) {
            return Err(Error::Domain("label position must be finite".into()));
        }
        Ok(())
    }

    pub fn near_shore(&self) -> bool {
        is_near_shore(self.distance_from_shore_km)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    /// `(pred index, truth index)` in the order the pairs were accepted.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

/// Greedy nearest-first one-to-one matching within each scene.
///
/// Candidate pairs are those whose centres are at most `radius_m` apart. They are
/// accepted by increasing distance; equal distances fall back to the truth position,
/// then the prediction position, then the input indices, so the result does not
/// depend on input order except between entries with identical content.
pub fn match_detections(preds: &[Detection], truth: &[GroundTruthLabel], radius_m: f64) -> Result<Matching> {
    if !(radius_m.is_finite() && radius_m > 0.0) {
        return Err(Error::Config(format!("match radius must be positive, got {radius_m}")));
    }
    let radius_px = radius_m / PIXEL_SPACING_M;
    let mut by_scene: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (t, l) in truth.iter().enumerate() {
        by_scene.entry(l.scene_id.as_str()).or_default().push(t);
    }
    struct Cand {
        dist: f64,
        truth: usize,
        pred: usize,
    }
    let mut cands = Vec::new();
    for (p, d) in preds.iter().enumerate() {
        let Some(ts) = by_scene.get(d.scene_id.as_str()) else { continue };
        for &t in ts {
            let l = &truth[t];
            let dist = (d.row - l.row).hypot(d.col - l.col);
            if dist <= radius_px {
                cands.push(Cand { dist, truth: t, pred: p });
            }
        }
    }
    cands.sort_by(|a, b| {
        let (ta, tb) = (&truth[a.truth], &truth[b.truth]);
        let (pa, pb) = (&preds[a.pred], &preds[b.pred]);
        a.dist
            .total_cmp(&b.dist)
            .then(ta.row.total_cmp(&tb.row))
            .then(ta.col.total_cmp(&tb.col))
            .then(pa.row.total_cmp(&pb.row))
            .then(pa.col.total_cmp(&pb.col))
            .then_with(|| pred_content_cmp(pa, pb))
            .then(a.truth.cmp(&b.truth))
            .then(a.pred.cmp(&b.pred))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut m = Matching::default();
    for c in cands {
        if !pred_used[c.pred] && !truth_used[c.truth] {
            pred_used[c.pred] = true;
            truth_used[c.truth] = true;
            m.pairs.push((c.pred, c.truth));
        }
    }
    m.unmatched_preds = (0..preds.len()).filter(|&i| !pred_used[i]).collect();
    m.unmatched_truth = (0..truth.len()).filter(|&i| !truth_used[i]).collect();
    Ok(m)
}

fn pred_content_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    /// `2·TP / (2·TP + FP + FN)`, which equals `2PR/(P+R)`; 0 when there is nothing
    /// to score.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

impl Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

/// Counts per metric. Additive across scenes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub detection: Counts,
    pub near_shore: Counts,
    pub vessel: Counts,
    pub fishing: Counts,
}

impl Add for MetricCounts {
    type Output = MetricCounts;
    fn add(self, o: MetricCounts) -> MetricCounts {
        MetricCounts {
            detection: self.detection + o.detection,
            near_shore: self.near_shore + o.near_shore,
            vessel: self.vessel + o.vessel,
            fishing: self.fishing + o.fishing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub f1_detection: f64,
    pub f1_near_shore: f64,
    pub f1_vessel: f64,
    pub f1_fishing: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub counts: MetricCounts,
}

impl From<MetricCounts> for ScoreReport {
    fn from(c: MetricCounts) -> Self {
        Self {
            f1_detection: c.detection.f1(),
            f1_near_shore: c.near_shore.f1(),
            f1_vessel: c.vessel.f1(),
            f1_fishing: c.fishing.f1(),
            tp: c.detection.tp,
            fp: c.detection.fp,
            fn_: c.detection.fn_,
            counts: c,
        }
    }
}

fn binary(counts: &mut Counts, predicted: bool, actual: bool) {
    match (predicted, actual) {
        (true, true) => counts.tp += 1,
        (true, false) => counts.fp += 1,
        (false, true) => counts.fn_ += 1,
        (false, false) => {}
    }
}

/// Metric counts for one set of predictions against one set of labels.
///
/// Near shore: matches and misses of labels under 2 km from shore, plus unmatched
/// predictions under 2 km (or without a shore distance) as false positives.
/// Vessel: matched pairs whose label is HIGH or MEDIUM confidence with `is_vessel`
/// set. Fishing: matched pairs whose label is a vessel with `is_fishing` set.
pub fn score_counts(preds: &[Detection], truth: &[GroundTruthLabel], radius_m: f64) -> Result<MetricCounts> {
    for l in truth {
        l.validate()?;
    }
    let m = match_detections(preds, truth, radius_m)?;
    let mut c = MetricCounts {
        detection: Counts {
            tp: m.pairs.len() as u64,
            fp: m.unmatched_preds.len() as u64,
            fn_: m.unmatched_truth.len() as u64,
        },
        ..Default::default()
    };
    for &(p, t) in &m.pairs {
        let (d, l) = (&preds[p], &truth[t]);
        if l.near_shore() {
            c.near_shore.tp += 1;
        }
        if let (Some(v), Confidence::High | Confidence::Medium) = (l.is_vessel, l.confidence) {
            binary(&mut c.vessel, d.class_id.is_vessel(), v);
        }
        if let (Some(true), Some(f)) = (l.is_vessel, l.is_fishing) {
            binary(&mut c.fishing, d.class_id.is_fishing(), f);
        }
    }
    c.near_shore.fn_ = m.unmatched_truth.iter().filter(|&&t| truth[t].near_shore()).count() as u64;
    c.near_shore.fp = m
        .unmatched_preds
        .iter()
        .filter(|&&p| preds[p].shore_km.is_none_or(is_near_shore))
        .count() as u64;
    Ok(c)
}

pub fn score(preds: &[Detection], truth: &[GroundTruthLabel], radius_m: f64) -> Result<ScoreReport> {
    Ok(score_counts(preds, truth, radius_m)?.into())
}

/// One coordinate sweep over the six (class, shore zone) cells, in class order with
/// offshore before near shore. Each cell takes the grid value that maximizes the
/// detection F1 with the other cells held at their current values; ties go to the
/// lower value. All cells start at the grid minimum.
pub fn threshold_search(
    preds_raw: &[Detection],
    truth: &[GroundTruthLabel],
    grid: &[f64],
    radius_m: f64,
) -> Result<ThresholdTable> {
    if grid.is_empty() {
        return Err(Error::Usage("threshold grid is empty".into()));
    }
    if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Usage(format!("threshold grid value {v} outside [0, 1]")));
    }
    let mut values = grid.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut table = ThresholdTable::uniform(values[0]);
    for class in ClassId::ALL {
        for near in [false, true] {
            let mut best = (f64::NEG_INFINITY, values[0]);
            for &v in &values {
                let mut t = table;
                t.set(class, near, v);
                let kept = apply_adaptive_thresholds(preds_raw, &t)?;
                let f1 = score_counts(&kept, truth, radius_m)?.detection.f1();
                if f1 > best.0 {
                    best = (f1, v);
                }
            }
            table.set(class, near, best.1);
        }
    }
    Ok(table)
}
