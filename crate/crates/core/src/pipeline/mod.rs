//! Scene-to-detections inference: normalization, tiling into overlapping chips,
//! decoding of the head maps, suppression, merging, shore distance and adaptive
//! thresholds.

mod detect;
mod nms;
mod run;
mod scene;
mod shore;
mod thresholds;
mod tiling;

pub use detect::{decode_heads, dfl_expectation, BoxXyxy, ClassId, Detection};
pub use nms::{merge_chip_detections, nms};
pub use run::{detect_chip, detect_scene, finish_scene, PipelineConfig, PreparedScene, WorkerPool};
pub use scene::{
    normalize_scene, normalize_value, resample_bathymetry, Grid, SceneRaster, BATHY_FACTOR,
    BATHY_SPACING_M, DB_RANGE, DEPTH_RANGE, PIXEL_SPACING_M,
};
pub use shore::{attach_shore_distance, is_land, shore_distance, ShoreDistance};
pub use thresholds::{apply_adaptive_thresholds, is_near_shore, ShoreThresholds, ThresholdTable, NEAR_SHORE_KM};
pub use tiling::{chip_origins, tile_offsets, tile_scene, Chip, ChipSource, CHIP_SIZE};
