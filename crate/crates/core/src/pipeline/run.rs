use rayon::prelude::*;

use super::detect::{decode_heads, Detection};
use super::nms::{merge_chip_detections, nms};
use super::scene::{normalize_scene, SceneRaster};
use super::shore::{attach_shore_distance, shore_distance, ShoreDistance};
use super::thresholds::{apply_adaptive_thresholds, ThresholdTable};
use super::tiling::{Chip, ChipSource};
use crate::error::{Error, Result};
use crate::model::{LoadedModel, Precision};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Pixels shared by neighbouring chips.
    pub overlap: usize,
    pub nms_iou: f64,
    /// Cells whose best class score is below this are not decoded.
    pub conf_floor: f64,
    /// `None` returns every merged detection.
    pub thresholds: Option<ThresholdTable>,
    pub workers: usize,
    pub precision: Precision,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            overlap: 200,
            nms_iou: 0.5,
            conf_floor: 0.05,
            thresholds: None,
            workers: 1,
            precision: Precision::Float,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!("nms_iou must be in (0, 1], got {}", self.nms_iou)));
        }
        if !(0.0..=1.0).contains(&self.conf_floor) {
            return Err(Error::Config(format!("conf_floor must be in [0, 1], got {}", self.conf_floor)));
        }
        if let Some(t) = &self.thresholds {
            t.validate()?;
        }
        Ok(())
    }
}

/// Per-scene state shared by all chips: the normalized rasters to cut from and the
/// shore distance grid.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: String,
    pub chips: ChipSource,
    pub shore: ShoreDistance,
}

impl PreparedScene {
    pub fn new(scene: &SceneRaster, overlap: usize) -> Result<Self> {
        let normalized = normalize_scene(scene);
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            chips: ChipSource::new(&normalized, overlap)?,
            shore: shore_distance(&scene.bathymetry),
        })
    }

    pub fn chip(&self, index: usize) -> Chip {
        self.chips.chip(index)
    }
}

/// Forward, decode and suppress one chip.
pub fn detect_chip(model: &LoadedModel, chip: &Chip, scene_id: &str, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let heads = model.forward(&chip.pixels, cfg.precision)?;
    let dets = decode_heads(&heads, chip.origin, cfg.conf_floor, scene_id)?;
    nms(dets, cfg.nms_iou)
}

/// Merge per-chip results, attach shore distances and apply the threshold table.
pub fn finish_scene(prepared: &PreparedScene, per_chip: Vec<Vec<Detection>>, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let mut merged = merge_chip_detections(per_chip, cfg.nms_iou)?;
    attach_shore_distance(&mut merged, &prepared.shore);
    match &cfg.thresholds {
        Some(t) => apply_adaptive_thresholds(&merged, t),
        None => Ok(merged),
    }
}

/// A fixed-size thread pool; chips are distributed over its workers and results are
/// collected in chip order.
pub struct WorkerPool {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("darkship-worker-{i}"))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        Ok(Self { pool, workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// Run the whole scene through the model.
    pub fn detect_scene(&self, model: &LoadedModel, scene: &SceneRaster, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
        cfg.validate()?;
        self.pool.install(|| {
            let prepared = PreparedScene::new(scene, cfg.overlap)?;
            let per_chip = (0..prepared.chips.len())
                .into_par_iter()
                .map(|i| detect_chip(model, &prepared.chip(i), &prepared.scene_id, cfg))
                .collect::<Result<Vec<_>>>()?;
            finish_scene(&prepared, per_chip, cfg)
        })
    }
}

/// [`WorkerPool::detect_scene`] on a pool of `cfg.workers` threads.
pub fn detect_scene(model: &LoadedModel, scene: &SceneRaster, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    WorkerPool::new(cfg.workers)?.detect_scene(model, scene, cfg)
}
