//! Stage latency breakdown and worker-count throughput sweep.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::LoadedModel;
use crate::pipeline::{
    decode_heads, finish_scene, nms, Detection, PipelineConfig, PreparedScene, SceneRaster, WorkerPool,
};

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn three_decimals<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e3).round() / 1e3)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ChipSample {
    pub run: usize,
    pub chip_index: usize,
    #[serde(serialize_with = "three_decimals")]
    pub pre_ms: f64,
    #[serde(serialize_with = "three_decimals")]
    pub infer_ms: f64,
    #[serde(serialize_with = "three_decimals")]
    pub decode_ms: f64,
    #[serde(serialize_with = "three_decimals")]
    pub nms_ms: f64,
}

/// Mean per-scene time of each stage. Scene-level work is attributed to `pre`
/// (normalization, bathymetry resampling, shore distance) and `nms` (merging,
/// shore lookup, thresholds).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub runs: usize,
    pub chips: usize,
    #[serde(serialize_with = "three_decimals")]
    pub pre_ms: f64,
    #[serde(serialize_with = "three_decimals")]
    pub infer_ms: f64,
    #[serde(serialize_with = "three_decimals")]
    pub decode_ms: f64,
    #[serde(serialize_with = "three_decimals")]
    pub nms_ms: f64,
    /// Mean end-to-end wall time of a run.
    #[serde(serialize_with = "three_decimals")]
    pub total_ms: f64,
    pub samples: Vec<ChipSample>,
}

impl StageTiming {
    pub fn stage_sum_ms(&self) -> f64 {
        self.pre_ms + self.infer_ms + self.decode_ms + self.nms_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub workers: usize,
    pub fps: f64,
    pub chips: usize,
    pub wall_s: f64,
}

fn timed_run(model: &LoadedModel, scene: &SceneRaster, cfg: &PipelineConfig, run: usize) -> Result<(StageTiming, Vec<Detection>)> {
    let start = Instant::now();
    let mut t = StageTiming {
        runs: 1,
        ..Default::default()
    };
    let prepared = PreparedScene::new(scene, cfg.overlap)?;
    t.pre_ms = ms(start.elapsed());
    let mut per_chip = Vec::with_capacity(prepared.chips.len());
    for i in 0..prepared.chips.len() {
        let mut s = ChipSample {
            run,
            chip_index: i,
            ..Default::default()
        };
        let c = Instant::now();
        let chip = prepared.chip(i);
        s.pre_ms = ms(c.elapsed());
        let c = Instant::now();
        let heads = model.forward(&chip.pixels, cfg.precision)?;
        s.infer_ms = ms(c.elapsed());
        let c = Instant::now();
        let dets = decode_heads(&heads, chip.origin, cfg.conf_floor, &prepared.scene_id)?;
        s.decode_ms = ms(c.elapsed());
        let c = Instant::now();
        per_chip.push(nms(dets, cfg.nms_iou)?);
        s.nms_ms = ms(c.elapsed());
        t.pre_ms += s.pre_ms;
        t.infer_ms += s.infer_ms;
        t.decode_ms += s.decode_ms;
        t.nms_ms += s.nms_ms;
        t.samples.push(s);
    }
    let c = Instant::now();
    let dets = finish_scene(&prepared, per_chip, cfg)?;
    t.nms_ms += ms(c.elapsed());
    t.chips = prepared.chips.len();
    t.total_ms = ms(start.elapsed());
    Ok((t, dets))
}

/// Time each stage on a single worker. One warm-up run is discarded, then the
/// stage means over `n_runs` runs are reported. Also returns the detections, which
/// are identical to those of [`crate::pipeline::detect_scene`].
pub fn run_breakdown(
    model: &LoadedModel,
    scene: &SceneRaster,
    cfg: &PipelineConfig,
    n_runs: usize,
) -> Result<(StageTiming, Vec<Detection>)> {
    if n_runs == 0 {
        return Err(Error::Usage("n_runs must be >= 1".into()));
    }
    cfg.validate()?;
    let pool = WorkerPool::new(1)?;
    pool.install(|| {
        let (_, dets) = timed_run(model, scene, cfg, 0)?;
        let mut acc = StageTiming::default();
        for run in 0..n_runs {
            let (t, d) = timed_run(model, scene, cfg, run)?;
            if d != dets {
                return Err(Error::Invariant(format!("run {run} produced different detections")));
            }
            acc.chips = t.chips;
            acc.pre_ms += t.pre_ms;
            acc.infer_ms += t.infer_ms;
            acc.decode_ms += t.decode_ms;
            acc.nms_ms += t.nms_ms;
            acc.total_ms += t.total_ms;
            acc.samples.extend(t.samples);
        }
        let n = n_runs as f64;
        acc.runs = n_runs;
        acc.pre_ms /= n;
        acc.infer_ms /= n;
        acc.decode_ms /= n;
        acc.nms_ms /= n;
        acc.total_ms /= n;
        Ok((acc, dets))
    })
}

/// Process the scene once per worker count and report chips per second. Every row
/// must produce the same detections.
pub fn run_sweep(
    model: &LoadedModel,
    scene: &SceneRaster,
    cfg: &PipelineConfig,
    workers: &[usize],
) -> Result<(Vec<ThroughputRow>, Vec<Detection>)> {
    if workers.is_empty() {
        return Err(Error::Usage("worker list is empty".into()));
    }
    let mut rows = Vec::with_capacity(workers.len());
    let mut reference: Option<Vec<Detection>> = None;
    for &w in workers {
        let pool = WorkerPool::new(w)?;
        let chips = PreparedScene::new(scene, cfg.overlap)?.chips.len();
        let start = Instant::now();
        let dets = pool.detect_scene(model, scene, cfg)?;
        let wall_s = start.elapsed().as_secs_f64();
        match &reference {
            Some(r) if *r != dets => {
                return Err(Error::Invariant(format!("{w} workers changed the detections")));
            }
            Some(_) => {}
            None => reference = Some(dets),
        }
        rows.push(ThroughputRow {
            workers: w,
            fps: chips as f64 / wall_s,
            chips,
            wall_s,
        });
    }
    Ok((rows, reference.unwrap_or_default()))
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub scene_id: String,
    pub breakdown: StageTiming,
    pub throughput: Vec<ThroughputRow>,
}

impl BenchReport {
    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        let b = &self.breakdown;
        let mut s = String::new();
        let _ = writeln!(s, "model {}  scene {}  chips {}  runs {}", self.model, self.scene_id, b.chips, b.runs);
        let _ = writeln!(s, "{:<8} {:>12}", "stage", "mean ms");
        for (name, v) in [
            ("pre", b.pre_ms),
            ("infer", b.infer_ms),
            ("decode", b.decode_ms),
            ("nms", b.nms_ms),
            ("total", b.total_ms),
        ] {
            let _ = writeln!(s, "{name:<8} {v:>12.3}");
        }
        let _ = writeln!(s, "{:>8} {:>10} {:>8} {:>10}", "workers", "fps", "chips", "wall s");
        for r in &self.throughput {
            let _ = writeln!(s, "{:>8} {:>10.3} {:>8} {:>10.3}", r.workers, r.fps, r.chips, r.wall_s);
        }
        s
    }
}
