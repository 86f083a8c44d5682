use serde::{Deserialize, Serialize};

use super::detect::{ClassId, Detection};
use super::shore::require_shore;
use crate::error::{Error, Result};

/// Detections closer to land than this use the near-shore thresholds.
pub const NEAR_SHORE_KM: f64 = 2.0;

pub fn is_near_shore(km: f64) -> bool {
    km < NEAR_SHORE_KM
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShoreThresholds {
    pub offshore: f64,
    pub near_shore: f64,
}

/// Score thresholds per class and shore zone.
///
/// Values above 1 are accepted and reject every detection of that cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTable {
    #[serde(rename = "non-vessel")]
    pub non_vessel: ShoreThresholds,
    #[serde(rename = "non-fishing")]
    pub non_fishing: ShoreThresholds,
    pub fishing: ShoreThresholds,
}

impl ThresholdTable {
    pub fn uniform(v: f64) -> Self {
        let t = ShoreThresholds {
            offshore: v,
            near_shore: v,
        };
        Self {
            non_vessel: t,
            non_fishing: t,
            fishing: t,
        }
    }

    fn cell(&self, class: ClassId) -> &ShoreThresholds {
        match class {
            ClassId::NonVessel => &self.non_vessel,
            ClassId::NonFishing => &self.non_fishing,
            ClassId::Fishing => &self.fishing,
        }
    }

    fn cell_mut(&mut self, class: ClassId) -> &mut ShoreThresholds {
        match class {
            ClassId::NonVessel => &mut self.non_vessel,
            ClassId::NonFishing => &mut self.non_fishing,
            ClassId::Fishing => &mut self.fishing,
        }
    }

    pub fn get(&self, class: ClassId, near_shore: bool) -> f64 {
        let c = self.cell(class);
        if near_shore {
            c.near_shore
        } else {
            c.offshore
        }
    }

    pub fn set(&mut self, class: ClassId, near_shore: bool, v: f64) {
        let c = self.cell_mut(class);
        if near_shore {
            c.near_shore = v;
        } else {
            c.offshore = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        for class in ClassId::ALL {
            for near in [false, true] {
                let v = self.get(class, near);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Config(format!(
                        "threshold for {class} ({}) must be a non-negative number, got {v}",
                        if near { "near shore" } else { "offshore" }
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for ThresholdTable {
    fn default() -> Self {
        Self::uniform(0.5)
    }
}

/// Keep detections whose score reaches the threshold for their class and shore zone.
/// Every detection must carry its shore distance.
pub fn apply_adaptive_thresholds(dets: &[Detection], table: &ThresholdTable) -> Result<Vec<Detection>> {
    table.validate()?;
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let near = is_near_shore(require_shore(d)?);
        if d.score >= table.get(d.class_id, near) {
            out.push(d.clone());
        }
    }
    Ok(out)
}
