use std::path::Path;

use darkship_core::formats::read_json;
use darkship_core::model::GraphSpec;
use darkship_core::pipeline::{PipelineConfig, ThresholdTable};
use darkship_core::scoring::DEFAULT_RADIUS_M;
use darkship_core::{Error, Result};
use serde::Deserialize;

pub const WORKERS_ENV: &str = "DARKSHIP_WORKERS";
pub const DEFAULT_MODEL: &str = "yolov8n-ghost-p2";

/// A preset name or a full graph description.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Spec(GraphSpec),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<GraphSpec> {
        let spec = match self {
            ModelChoice::Preset(name) => name.parse()?,
            ModelChoice::Spec(s) => s.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A single value for every cell or the full table.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ThresholdChoice {
    Uniform(f64),
    Table(ThresholdTable),
}

impl ThresholdChoice {
    pub fn table(&self) -> ThresholdTable {
        match self {
            ThresholdChoice::Uniform(v) => ThresholdTable::uniform(*v),
            ThresholdChoice::Table(t) => *t,
        }
    }

    /// A number, or the path of a JSON file holding either form.
    pub fn from_arg(arg: &str) -> Result<Self> {
        match arg.trim().parse::<f64>() {
            Ok(v) => Ok(ThresholdChoice::Uniform(v)),
            Err(_) => read_json(Path::new(arg)),
        }
    }
}

/// Contents of a `--config` file. Every field is optional and each has a flag of
/// the same name that takes precedence.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelChoice>,
    pub overlap: Option<usize>,
    pub nms_iou: Option<f64>,
    pub conf_floor: Option<f64>,
    pub thresholds: Option<ThresholdChoice>,
    pub workers: Option<usize>,
    pub radius_m: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }
}

/// Values given on the command line, overriding the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub overlap: Option<usize>,
    pub nms_iou: Option<f64>,
    pub conf_floor: Option<f64>,
    pub thresholds: Option<String>,
    pub workers: Option<usize>,
    pub radius_m: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: GraphSpec,
    pub pipeline: PipelineConfig,
    pub radius_m: f64,
}

/// The worker count from the environment, if set.
pub fn env_workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Usage(format!("{WORKERS_ENV}: {e}"))),
    }
}

pub fn resolve_model(file: &FileConfig, flag: Option<&str>) -> Result<GraphSpec> {
    match (flag, &file.model) {
        (Some(m), _) => ModelChoice::Preset(m.into()).resolve(),
        (None, Some(m)) => m.resolve(),
        (None, None) => ModelChoice::Preset(DEFAULT_MODEL.into()).resolve(),
    }
}

/// Flag, then config file, then the built-in default. The worker count falls back to
/// the environment before the default.
pub fn resolve(file: &FileConfig, flags: &Overrides) -> Result<Resolved> {
    let model = resolve_model(file, flags.model.as_deref())?;
    let defaults = PipelineConfig::default();
    let thresholds = match (&flags.thresholds, &file.thresholds) {
        (Some(arg), _) => Some(ThresholdChoice::from_arg(arg)?.table()),
        (None, Some(t)) => Some(t.table()),
        (None, None) => None,
    };
    let workers = match flags.workers.or(file.workers) {
        Some(w) => w,
        None => env_workers()?.unwrap_or(defaults.workers),
    };
    let pipeline = PipelineConfig {
        overlap: flags.overlap.or(file.overlap).unwrap_or(defaults.overlap),
        nms_iou: flags.nms_iou.or(file.nms_iou).unwrap_or(defaults.nms_iou),
        conf_floor: flags.conf_floor.or(file.conf_floor).unwrap_or(defaults.conf_floor),
        thresholds,
        workers,
        precision: defaults.precision,
    };
    pipeline.validate()?;
    Ok(Resolved {
        model,
        pipeline,
        radius_m: resolve_radius(file, flags.radius_m)?,
    })
}

pub fn resolve_radius(file: &FileConfig, flag: Option<f64>) -> Result<f64> {
    let radius_m = flag.or(file.radius_m).unwrap_or(DEFAULT_RADIUS_M);
    if !(radius_m.is_finite() && radius_m > 0.0) {
        return Err(Error::Config(format!("radius_m must be positive, got {radius_m}")));
    }
    Ok(radius_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> FileConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn flags_override_file_values() {
        let file = parse(r#"{"model": "yolov8n", "overlap": 100, "nms_iou": 0.6, "thresholds": 0.3, "workers": 3}"#);
        let r = resolve(&file, &Overrides::default()).unwrap();
        assert_eq!(r.model.to_string(), "yolov8n");
        assert_eq!((r.pipeline.overlap, r.pipeline.nms_iou, r.pipeline.workers), (100, 0.6, 3));
        assert_eq!(r.pipeline.thresholds, Some(ThresholdTable::uniform(0.3)));

        let flags = Overrides {
            model: Some("yolov8s-ghost-p2".into()),
            overlap: Some(0),
            thresholds: Some("1.01".into()),
            workers: Some(8),
            ..Overrides::default()
        };
        let r = resolve(&file, &flags).unwrap();
        assert_eq!(r.model.to_string(), "yolov8s-ghost-p2");
        assert_eq!((r.pipeline.overlap, r.pipeline.nms_iou, r.pipeline.workers), (0, 0.6, 8));
        assert_eq!(r.pipeline.thresholds, Some(ThresholdTable::uniform(1.01)));
    }

    #[test]
    fn model_and_thresholds_accept_both_forms() {
        let file = parse(
            r#"{"model": {"variant": "n", "use_ghost": true, "use_c3": true, "depth_multiple": 0.33, "width_multiple": 0.0625, "reg_max": 4},
                "thresholds": {"non-vessel": {"offshore": 0.1, "near_shore": 0.2},
                               "non-fishing": {"offshore": 0.3, "near_shore": 0.4},
                               "fishing": {"offshore": 0.5, "near_shore": 0.6}}}"#,
        );
        let r = resolve(&file, &Overrides::default()).unwrap();
        assert_eq!((r.model.reg_max, r.model.width_multiple), (4, 0.0625));
        assert_eq!(r.pipeline.thresholds.unwrap().fishing.near_shore, 0.6);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"overlapp": 3}"#).is_err());
        let bad = parse(r#"{"nms_iou": 0}"#);
        assert!(matches!(resolve(&bad, &Overrides::default()), Err(Error::Config(_))));
        let bad = Overrides {
            radius_m: Some(-1.0),
            ..Overrides::default()
        };
        assert!(matches!(resolve(&FileConfig::default(), &bad), Err(Error::Config(_))));
    }
}
