use std::collections::HashMap;

use super::detect::{BoxXyxy, Detection};
use crate::error::{Error, Result};

const CELL: f64 = 64.0;
/// Boxes spanning more grid cells than this are kept in a flat list instead.
const MAX_CELLS: i64 = 1024;

/// Uniform grid over kept boxes so each candidate is only compared with kept boxes
/// it could overlap.
struct KeptIndex {
    cells: HashMap<(i64, i64), Vec<usize>>,
    large: Vec<usize>,
    boxes: Vec<BoxXyxy>,
}

impl KeptIndex {
    fn new() -> Self {
        Self {
            cells: HashMap::new(),
            large: Vec::new(),
            boxes: Vec::new(),
        }
    }

    /// Cell range covered by `b`, or `None` if it is too large to index.
    fn span(b: &BoxXyxy) -> Option<(i64, i64, i64, i64)> {
        let f = |v: f64| (v / CELL).floor().clamp(-1e12, 1e12) as i64;
        let (x1, y1, x2, y2) = (f(b.x1), f(b.y1), f(b.x2), f(b.y2));
        let n = (x2 - x1 + 1).saturating_mul(y2 - y1 + 1);
        (n <= MAX_CELLS).then_some((x1, y1, x2, y2))
    }

    fn overlaps(&self, b: &BoxXyxy, thresh: f64) -> bool {
        let hit = |k: &usize| self.boxes[*k].iou(b) >= thresh;
        if self.large.iter().any(hit) {
            return true;
        }
        let Some((cx1, cy1, cx2, cy2)) = Self::span(b) else {
            return self.boxes.iter().any(|k| k.iou(b) >= thresh);
        };
        for cy in cy1..=cy2 {
            for cx in cx1..=cx2 {
                if let Some(ids) = self.cells.get(&(cx, cy)) {
                    if ids.iter().any(hit) {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn insert(&mut self, b: BoxXyxy) {
        let id = self.boxes.len();
        self.boxes.push(b);
        let Some((cx1, cy1, cx2, cy2)) = Self::span(&b) else {
            self.large.push(id);
            return;
        };
        for cy in cy1..=cy2 {
            for cx in cx1..=cx2 {
                self.cells.entry((cx, cy)).or_default().push(id);
            }
        }
    }
}

/// Greedy class-agnostic non-maximum suppression.
///
/// Candidates are visited by score descending, then row and column ascending; one is
/// kept unless a kept box has IoU ≥ `iou_thresh` with it. Output is in visit order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "NMS IoU threshold must be in (0, 1], got {iou_thresh}"
        )));
    }
    if let Some(d) = dets.iter().find(|d| !box_is_valid(&d.bbox) || !d.score.is_finite()) {
        return Err(Error::Numeric(format!("non-finite detection {d:?}")));
    }
    dets.sort_by(|a, b| a.rank_cmp(b));
    let mut index = KeptIndex::new();
    let mut kept = Vec::new();
    for d in dets {
        if !index.overlaps(&d.bbox, iou_thresh) {
            index.insert(d.bbox);
            kept.push(d);
        }
    }
    Ok(kept)
}

fn box_is_valid(b: &BoxXyxy) -> bool {
    [b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite())
}

/// Combine per-chip detections of one scene: concatenate, suppress duplicates from
/// overlapping chips with a global NMS, and sort by (row, col).
pub fn merge_chip_detections(per_chip: Vec<Vec<Detection>>, iou_thresh: f64) -> Result<Vec<Detection>> {
    let all: Vec<Detection> = per_chip.into_iter().flatten().collect();
    let mut kept = nms(all, iou_thresh)?;
    kept.sort_by(|a, b| a.position_cmp(b));
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ClassId;

    fn det(x: f64, y: f64, s: f64, score: f64) -> Detection {
        Detection::from_box("s", BoxXyxy::new(x, y, x + s, y + s), ClassId::Fishing, score)
    }

    #[test]
    fn suppresses_lower_scored_overlap() {
        let out = nms(vec![det(0.0, 0.0, 10.0, 0.5), det(1.0, 1.0, 10.0, 0.9), det(50.0, 50.0, 10.0, 0.1)], 0.5).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.1);
    }

    #[test]
    fn identical_boxes_keep_one() {
        let d = det(5.0, 5.0, 20.0, 0.7);
        let out = nms(vec![d.clone(), d.clone(), d.clone()], 0.5).unwrap();
        assert_eq!(out, vec![d]);
    }

    #[test]
    fn equal_scores_prefer_top_left() {
        let out = nms(vec![det(2.0, 0.0, 10.0, 0.5), det(0.0, 0.0, 10.0, 0.5)], 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox.x1, 0.0);
    }

    #[test]
    fn threshold_is_inclusive() {
        // IoU exactly 1/3.
        let a = det(0.0, 0.0, 10.0, 0.9);
        let b = Detection::from_box("s", BoxXyxy::new(5.0, 0.0, 15.0, 10.0), ClassId::Fishing, 0.8);
        assert_eq!(nms(vec![a.clone(), b.clone()], 1.0 / 3.0).unwrap().len(), 1);
        assert_eq!(nms(vec![a, b], 0.34).unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(nms(vec![], 0.0).is_err());
        assert!(nms(vec![det(f64::NAN, 0.0, 1.0, 0.5)], 0.5).is_err());
        assert!(nms(vec![], 0.5).unwrap().is_empty());
    }
}
