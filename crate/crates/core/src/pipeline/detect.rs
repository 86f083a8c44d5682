use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadOutput;
use crate::tensor::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassId {
    NonVessel = 0,
    NonFishing = 1,
    Fishing = 2,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::NonVessel, ClassId::NonFishing, ClassId::Fishing];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Domain(format!("class index {i} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_vessel(self) -> bool {
        self != ClassId::NonVessel
    }

    pub fn is_fishing(self) -> bool {
        self == ClassId::Fishing
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::NonVessel => "non-vessel",
            ClassId::NonFishing => "non-fishing",
            ClassId::Fishing => "fishing",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-vessel" | "0" => Ok(ClassId::NonVessel),
            "non-fishing" | "1" => Ok(ClassId::NonFishing),
            "fishing" | "2" => Ok(ClassId::Fishing),
            other => Err(Error::Domain(format!("unknown class `{other}`"))),
        }
    }
}

/// Axis-aligned box in scene pixels; x is the column axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Intersection over union. Two zero-area boxes have IoU 1 when identical and
    /// 0 otherwise.
    pub fn iou(&self, o: &BoxXyxy) -> f64 {
        let iw = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let ih = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else if self == o {
            1.0
        } else {
            0.0
        }
    }

    fn total_cmp(&self, o: &BoxXyxy) -> Ordering {
        self.x1
            .total_cmp(&o.x1)
            .then(self.y1.total_cmp(&o.y1))
            .then(self.x2.total_cmp(&o.x2))
            .then(self.y2.total_cmp(&o.y2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub scene_id: String,
    /// Box centre in scene pixels.
    pub row: f64,
    pub col: f64,
    pub bbox: BoxXyxy,
    pub class_id: ClassId,
    pub score: f64,
    /// Distance to the nearest land cell, filled once the scene's bathymetry is known.
    pub shore_km: Option<f64>,
}

impl Detection {
    pub fn from_box(scene_id: impl Into<String>, bbox: BoxXyxy, class_id: ClassId, score: f64) -> Self {
        Self {
            scene_id: scene_id.into(),
            row: 0.5 * (bbox.y1 + bbox.y2),
            col: 0.5 * (bbox.x1 + bbox.x2),
            bbox,
            class_id,
            score,
            shore_km: None,
        }
    }

    /// Suppression order: score descending, then row, then column ascending. The
    /// remaining fields only break exact ties so the order is total.
    pub fn rank_cmp(&self, o: &Detection) -> Ordering {
        o.score
            .total_cmp(&self.score)
            .then(self.row.total_cmp(&o.row))
            .then(self.col.total_cmp(&o.col))
            .then_with(|| self.tail_cmp(o))
    }

    /// Output order: row, then column ascending, then score descending.
    pub fn position_cmp(&self, o: &Detection) -> Ordering {
        self.row
            .total_cmp(&o.row)
            .then(self.col.total_cmp(&o.col))
            .then(o.score.total_cmp(&self.score))
            .then_with(|| self.tail_cmp(o))
    }

    fn tail_cmp(&self, o: &Detection) -> Ordering {
        self.bbox
            .total_cmp(&o.bbox)
            .then(self.class_id.cmp(&o.class_id))
            .then_with(|| self.scene_id.cmp(&o.scene_id))
    }
}

/// Turn raw head maps of one chip into scored boxes in scene coordinates.
///
/// Class scores are sigmoids of the logits and the best class wins, lowest id first
/// on ties; cells whose best score is below `conf_floor` are dropped. Each side
/// distance is the softmax expectation over its DFL bins times the level stride,
/// measured from the cell centre.
pub fn decode_heads(
    heads: &HeadOutput,
    origin: (usize, usize),
    conf_floor: f64,
    scene_id: &str,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let (r0, c0) = (origin.0 as f64, origin.1 as f64);
    for level in &heads.levels {
        let cs = level.class_logits.shape();
        let bs = level.box_logits.shape();
        if cs.channels != ClassId::ALL.len() {
            return Err(Error::Dimension {
                axis: "class channels",
                expected: ClassId::ALL.len(),
                found: cs.channels,
            });
        }
        if bs.channels == 0 || bs.channels % 4 != 0 || (bs.height, bs.width) != (cs.height, cs.width) {
            return Err(Error::Dimension {
                axis: "box channels",
                expected: 4 * bs.channels.div_ceil(4).max(1),
                found: bs.channels,
            });
        }
        let reg_max = bs.channels / 4;
        let stride = level.stride as f64;
        let mut bins = vec![0f64; reg_max];
        for b in 0..cs.batch {
            for gy in 0..cs.height {
                for gx in 0..cs.width {
                    let mut best = (0, f64::NEG_INFINITY);
                    for c in 0..cs.channels {
                        let p = sigmoid(level.class_logits.get(b, c, gy, gx) as f64);
                        if p > best.1 {
                            best = (c, p);
                        }
                    }
                    if best.1 < conf_floor {
                        continue;
                    }
                    let mut dist = [0f64; 4];
                    for (side, d) in dist.iter_mut().enumerate() {
                        for (k, v) in bins.iter_mut().enumerate() {
                            *v = level.box_logits.get(b, side * reg_max + k, gy, gx) as f64;
                        }
                        *d = dfl_expectation(&bins) * stride;
                    }
                    let cx = (gx as f64 + 0.5) * stride + c0;
                    let cy = (gy as f64 + 0.5) * stride + r0;
                    let bbox = BoxXyxy::new(cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3]);
                    out.push(Detection::from_box(scene_id, bbox, ClassId::from_index(best.0)?, best.1));
                }
            }
        }
    }
    Ok(out)
}

/// `Σ k·softmax(logits)_k`, computed stably.
pub fn dfl_expectation(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = 0.0;
    for (k, &l) in logits.iter().enumerate() {
        let e = (l - m).exp();
        z += e;
        acc += k as f64 * e;
    }
    acc / z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadLevel;
    use crate::tensor::{Shape, Tensor};

    fn level(stride: usize, reg_max: usize, cls: [f32; 3], bins: &[f32]) -> HeadLevel {
        HeadLevel {
            level: 3,
            stride,
            box_logits: Tensor::from_fn(Shape::new(1, 4 * reg_max, 2, 2), |_, c, _, _| bins[c % reg_max]),
            class_logits: Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, _, _| cls[c]),
        }
    }

    #[test]
    fn one_hot_bins_decode_exactly() {
        for k in 0..16 {
            let mut bins = vec![-1e4f32; 16];
            bins[k] = 1e4;
            let h = HeadOutput {
                levels: vec![level(8, 16, [-1.0, 3.0, 0.0], &bins)],
            };
            let d = decode_heads(&h, (0, 0), 0.05, "s").unwrap();
            assert_eq!(d.len(), 4);
            let first = &d[0];
            assert_eq!(first.class_id, ClassId::NonFishing);
            assert_eq!(first.bbox.x2 - 4.0, (k * 8) as f64);
            assert_eq!(4.0 - first.bbox.x1, (k * 8) as f64);
        }
    }

    #[test]
    fn uniform_bins_expect_midpoint() {
        assert_eq!(dfl_expectation(&[0.0; 16]), 7.5);
        assert_eq!(dfl_expectation(&[5.0; 4]), 1.5);
    }

    #[test]
    fn floor_and_origin() {
        let h = HeadOutput {
            levels: vec![level(16, 4, [-5.0, -6.0, -7.0], &[0.0; 4])],
        };
        assert!(decode_heads(&h, (0, 0), 0.05, "s").unwrap().is_empty());
        let d = decode_heads(&h, (100, 300), 0.0, "s").unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!((d[0].row, d[0].col), (108.0, 308.0));
        assert_eq!(d[0].class_id, ClassId::NonVessel);
    }

    #[test]
    fn iou_edge_cases() {
        let a = BoxXyxy::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BoxXyxy::new(10.0, 0.0, 20.0, 10.0)), 0.0);
        assert!((a.iou(&BoxXyxy::new(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        let p = BoxXyxy::new(3.0, 3.0, 3.0, 3.0);
        assert_eq!(p.iou(&p), 1.0);
        assert_eq!(p.iou(&BoxXyxy::new(4.0, 4.0, 4.0, 4.0)), 0.0);
    }

    #[test]
    fn class_names_round_trip() {
        for c in ClassId::ALL {
            assert_eq!(c.name().parse::<ClassId>().unwrap(), c);
        }
        assert!("boat".parse::<ClassId>().is_err());
    }
}
