use std::io::Write;
use std::path::Path;

use darkship_core::bench::{run_breakdown, run_sweep, BenchReport};
use darkship_core::formats::{
    encode_detections, encode_json, read_detections, read_labels, read_scene, read_weights, write_labels,
    write_scene, write_weights,
};
use darkship_core::model::{build_model, calibrate as calibrate_model, count_params_flops, LoadedModel, Precision, WeightStore};
use darkship_core::pipeline::{chip_origins, detect_scene, PipelineConfig, PreparedScene, CHIP_SIZE};
use darkship_core::scoring::{score as score_report, threshold_search};
use darkship_core::synth::{synth_scene, SynthParams};
use darkship_core::{Error, Result};
use serde::Serialize;

use crate::config::{resolve, resolve_model, resolve_radius, FileConfig};
use crate::{
    BenchArgs, CalibrateArgs, CountArgs, DetectArgs, InitWeightsArgs, PrecisionArg, RunArgs, ScoreArgs, SynthArgs,
    ThresholdsArgs,
};

/// Write to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => darkship_core::formats::write_file(p, bytes),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|source| Error::Io {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}

struct Prepared {
    name: String,
    model: LoadedModel,
    cfg: PipelineConfig,
}

fn load_model(weights: &Path, run: &RunArgs, precision: Option<PrecisionArg>) -> Result<Prepared> {
    let file = FileConfig::load(run.config.as_deref())?;
    let r = resolve(&file, &run.overrides())?;
    let store = read_weights(weights)?;
    let mut cfg = r.pipeline;
    cfg.precision = match precision {
        Some(PrecisionArg::Float) => Precision::Float,
        Some(PrecisionArg::Quantized) => Precision::Quantized,
        None if store.is_quantized() => Precision::Quantized,
        None => Precision::Float,
    };
    let model = LoadedModel::new(build_model(&r.model)?, &store)?;
    Ok(Prepared {
        name: r.model.to_string(),
        model,
        cfg,
    })
}

pub fn detect(a: &DetectArgs) -> Result<()> {
    let p = load_model(&a.weights, &a.run, a.precision)?;
    let scene = read_scene(&a.scene)?;
    let mut cfg = p.cfg;
    if a.raw {
        cfg.thresholds = None;
    }
    let chips = chip_origins(scene.height(), scene.width(), cfg.overlap)?.len();
    let dets = detect_scene(&p.model, &scene, &cfg)?;
    emit(a.out.as_deref(), &encode_detections(&dets, a.raw)?)?;
    eprintln!(
        "{}: {} chips, {} detections ({}, {} workers)",
        scene.scene_id,
        chips,
        dets.len(),
        p.name,
        cfg.workers
    );
    Ok(())
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let radius_m = resolve_radius(&file, a.radius_m)?;
    let preds = read_detections(&a.detections)?;
    let truth = read_labels(&a.labels)?;
    let report = score_report(&preds, &truth, radius_m)?;
    emit(a.out.as_deref(), &encode_json(&report)?)
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let spec = resolve_model(&file, a.model.as_deref())?;
    let overlap = a.overlap.or(file.overlap).unwrap_or(PipelineConfig::default().overlap);
    let store = read_weights(&a.weights)?;
    if store.is_quantized() {
        return Err(Error::Usage(format!("{} is already quantized", a.weights.display())));
    }
    let model = LoadedModel::new(build_model(&spec)?, &store)?;
    let limit = a.max_chips.unwrap_or(usize::MAX);
    let mut chips = Vec::new();
    'scenes: for path in &a.scenes {
        let prepared = PreparedScene::new(&read_scene(path)?, overlap)?;
        for i in 0..prepared.chips.len() {
            if chips.len() == limit {
                break 'scenes;
            }
            chips.push(prepared.chip(i).pixels);
        }
    }
    let (quantized, stats) = calibrate_model(&model, &chips)?;
    write_weights(&a.out, &quantized)?;
    eprintln!("calibrated {} layers on {} chips", stats.layers.len(), stats.chips);
    Ok(())
}

/// `start:stop:step` or `a,b,c`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |what: &str| Error::Usage(format!("invalid threshold grid `{spec}`: {what}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number")));
    if spec.trim().is_empty() {
        return Ok(Vec::new());
    }
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(bad("expected start:stop:step"));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step.is_finite() && step > 0.0) || !(start.is_finite() && stop.is_finite()) {
            return Err(bad("step must be positive and bounds finite"));
        }
        let n = ((stop - start) / step + 1e-9).floor();
        if n < 0.0 {
            return Ok(Vec::new());
        }
        return Ok((0..=n as usize)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect());
    }
    spec.split(',').map(num).collect()
}

pub fn thresholds(a: &ThresholdsArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let radius_m = resolve_radius(&file, a.radius_m)?;
    let grid = parse_grid(&a.grid)?;
    let preds = read_detections(&a.detections)?;
    let truth = read_labels(&a.labels)?;
    let table = threshold_search(&preds, &truth, &grid, radius_m)?;
    emit(a.out.as_deref(), &encode_json(&table)?)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if !a.allow_small && (a.width < CHIP_SIZE || a.height < CHIP_SIZE) {
        return Err(Error::Usage(format!(
            "scene {}x{} is smaller than one {CHIP_SIZE}px chip; pass --allow-small to pad it",
            a.width, a.height
        )));
    }
    let mut p = SynthParams::new(a.seed, a.width, a.height, a.targets);
    p.clutter_db = a.clutter_db;
    if let Some(id) = &a.scene_id {
        p.scene_id = id.clone();
    }
    let s = synth_scene(&p)?;
    write_scene(&a.scene_out, &s.scene)?;
    write_labels(&a.labels_out, &s.labels)?;
    eprintln!("{}: {}x{}, {} targets", p.scene_id, a.width, a.height, s.targets.len());
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let p = load_model(&a.weights, &a.run, a.precision)?;
    let scene = read_scene(&a.scene)?;
    let sweep = if a.sweep.is_empty() { vec![p.cfg.workers] } else { a.sweep.clone() };
    let (breakdown, reference) = run_breakdown(&p.model, &scene, &p.cfg, a.runs)?;
    let (throughput, swept) = run_sweep(&p.model, &scene, &p.cfg, &sweep)?;
    if swept != reference {
        return Err(Error::Invariant("worker sweep changed the detections".into()));
    }
    let report = BenchReport {
        model: p.name,
        scene_id: scene.scene_id.clone(),
        breakdown,
        throughput,
    };
    let bytes = if a.table { report.table().into_bytes() } else { encode_json(&report)? };
    emit(a.out.as_deref(), &bytes)
}

pub fn init_weights(a: &InitWeightsArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let spec = resolve_model(&file, a.model.as_deref())?;
    let g = build_model(&spec)?;
    let store = WeightStore::seeded(&g, a.seed);
    write_weights(&a.out, &store)?;
    eprintln!("{spec}: {} conv layers, seed {}", store.len(), a.seed);
    Ok(())
}

#[derive(Serialize)]
struct CountReport {
    model: String,
    input: usize,
    params: u64,
    flops: u64,
}

pub fn count(a: &CountArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let spec = resolve_model(&file, a.model.as_deref())?;
    let c = count_params_flops(&build_model(&spec)?, a.input, a.input)?;
    let report = CountReport {
        model: spec.to_string(),
        input: a.input,
        params: c.params,
        flops: c.flops,
    };
    emit(None, &encode_json(&report)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0:1:0.25").unwrap(), [0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = parse_grid("0:1:0.1").unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(parse_grid("0.2, 0.4,0.9").unwrap(), [0.2, 0.4, 0.9]);
        assert!(parse_grid("").unwrap().is_empty());
        assert!(parse_grid("1:0:0.1").unwrap().is_empty());
        assert!(matches!(parse_grid("0:1"), Err(Error::Usage(_))));
        assert!(matches!(parse_grid("0:1:0"), Err(Error::Usage(_))));
        assert!(matches!(parse_grid("a,b"), Err(Error::Usage(_))));
    }
}
