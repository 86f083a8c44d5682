//! Seeded synthetic SAR scenes with labelled vessel-like targets.
//!
//! The background is multiplicative gamma speckle around a clutter level in dB, a
//! little brighter over land. Bathymetry rises from deep water to a wavy coastline
//! on the left edge. Targets are bright rotated rectangles placed over water, at
//! least [`MIN_SEPARATION_PX`] apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{is_land, shore_distance, Grid, SceneRaster, BATHY_FACTOR};
use crate::scoring::{Confidence, GroundTruthLabel};

pub const SPECKLE_LOOKS: f64 = 4.0;
pub const LAND_OFFSET_DB: f64 = 2.0;
pub const VH_OFFSET_DB: f64 = -8.0;
pub const TARGET_DB: (f64, f64) = (15.0, 25.0);
pub const TARGET_LENGTH_PX: (f64, f64) = (5.0, 30.0);
pub const MIN_SEPARATION_PX: f64 = 50.0;
const EDGE_MARGIN_PX: usize = 20;
const PLACEMENT_TRIES: usize = 10_000;
/// Elevation change per bathymetry cell away from the coastline, in metres.
const SLOPE_M: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub scene_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_targets: usize,
    /// Mean VV backscatter of open water, dB.
    pub clutter_db: f64,
}

impl SynthParams {
    pub fn new(seed: u64, width: usize, height: usize, n_targets: usize) -> Self {
        Self {
            scene_id: format!("synth-{seed}"),
            seed,
            width,
            height,
            n_targets,
            clutter_db: -20.0,
        }
    }
}

/// One injected target with its exact geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub row: usize,
    pub col: usize,
    pub length_px: f64,
    pub width_px: f64,
    pub angle_rad: f64,
    pub amplitude_db: f64,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub scene: SceneRaster,
    pub labels: Vec<GroundTruthLabel>,
    pub targets: Vec<Target>,
}

pub fn synth_scene(p: &SynthParams) -> Result<SynthScene> {
    if p.width < 2 * EDGE_MARGIN_PX + 1 || p.height < 2 * EDGE_MARGIN_PX + 1 {
        return Err(Error::Config(format!(
            "synthetic scenes need at least {} pixels per side",
            2 * EDGE_MARGIN_PX + 1
        )));
    }
    if !p.clutter_db.is_finite() {
        return Err(Error::Config("clutter level must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let bathymetry = coastline(&mut rng, p.width, p.height);

    let speckle = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).map_err(|e| Error::Invariant(e.to_string()))?;
    let mut vv = Vec::with_capacity(p.width * p.height);
    let mut vh = Vec::with_capacity(p.width * p.height);
    for r in 0..p.height {
        let brow = bathymetry.row((r / BATHY_FACTOR).min(bathymetry.height() - 1));
        for c in 0..p.width {
            let land = is_land(brow[(c / BATHY_FACTOR).min(bathymetry.width() - 1)]);
            let base = p.clutter_db + if land { LAND_OFFSET_DB } else { 0.0 };
            let s1: f64 = speckle.sample(&mut rng);
            let s2: f64 = speckle.sample(&mut rng);
            vv.push((base + 10.0 * s1.log10()) as f32);
            vh.push((base + VH_OFFSET_DB + 10.0 * s2.log10()) as f32);
        }
    }
    let mut vv = Grid::new(p.width, p.height, vv)?;
    let mut vh = Grid::new(p.width, p.height, vh)?;

    let targets = place_targets(&mut rng, p, &bathymetry)?;
    for t in &targets {
        paint(&mut vv, t, p.clutter_db + t.amplitude_db);
        paint(&mut vh, t, p.clutter_db + VH_OFFSET_DB + t.amplitude_db);
    }

    let shore = shore_distance(&bathymetry);
    let labels = targets
        .iter()
        .map(|t| {
            let (is_vessel, is_fishing) = match rng.gen_range(0..10) {
                0 | 1 => (Some(false), None),
                2 => (Some(true), None),
                3..=5 => (Some(true), Some(true)),
                _ => (Some(true), Some(false)),
            };
            let confidence = match rng.gen_range(0..10) {
                0..=4 => Confidence::High,
                5..=7 => Confidence::Medium,
                _ => Confidence::Low,
            };
            GroundTruthLabel {
                scene_id: p.scene_id.clone(),
                row: t.row as f64,
                col: t.col as f64,
                is_vessel,
                is_fishing,
                confidence,
                distance_from_shore_km: shore.at_pixel(t.row as f64, t.col as f64),
            }
        })
        .collect();
    Ok(SynthScene {
        scene: SceneRaster::new(p.scene_id.clone(), vv, vh, bathymetry)?,
        labels,
        targets,
    })
}

fn coastline(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Grid {
    let bw = width.div_ceil(BATHY_FACTOR);
    let bh = height.div_ceil(BATHY_FACTOR);
    let base = bw as f64 * rng.gen_range(0.05..0.15) + 1.0;
    let amplitude = rng.gen_range(0.5..2.0);
    let period = rng.gen_range(8.0..24.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut g = Grid::filled(bw, bh, 0.0);
    for r in 0..bh {
        let coast = base + amplitude * (r as f64 / period * std::f64::consts::TAU + phase).sin();
        for c in 0..bw {
            let elevation = ((coast - c as f64) * SLOPE_M).clamp(-5000.0, 500.0);
            g.set(r, c, elevation as f32);
        }
    }
    g
}

fn place_targets(rng: &mut ChaCha8Rng, p: &SynthParams, bathymetry: &Grid) -> Result<Vec<Target>> {
    let mut out: Vec<Target> = Vec::with_capacity(p.n_targets);
    let mut tries = 0;
    while out.len() < p.n_targets {
        tries += 1;
        if tries > PLACEMENT_TRIES * p.n_targets.max(1) {
            return Err(Error::Config(format!(
                "could only place {} of {} targets at {MIN_SEPARATION_PX} px spacing",
                out.len(),
                p.n_targets
            )));
        }
        let row = rng.gen_range(EDGE_MARGIN_PX..p.height - EDGE_MARGIN_PX);
        let col = rng.gen_range(EDGE_MARGIN_PX..p.width - EDGE_MARGIN_PX);
        let cell = bathymetry.get(
            (row / BATHY_FACTOR).min(bathymetry.height() - 1),
            (col / BATHY_FACTOR).min(bathymetry.width() - 1),
        );
        if is_land(cell) {
            continue;
        }
        let clear = out.iter().all(|t| {
            let (dr, dc) = (t.row as f64 - row as f64, t.col as f64 - col as f64);
            dr.hypot(dc) >= MIN_SEPARATION_PX
        });
        if !clear {
            continue;
        }
        let length_px = rng.gen_range(TARGET_LENGTH_PX.0..=TARGET_LENGTH_PX.1);
        out.push(Target {
            row,
            col,
            length_px,
            width_px: (length_px / 5.0).max(2.0),
            angle_rad: rng.gen_range(0.0..std::f64::consts::PI),
            amplitude_db: rng.gen_range(TARGET_DB.0..=TARGET_DB.1),
        });
    }
    Ok(out)
}

/// Set every pixel inside the target's rotated rectangle to `db`.
fn paint(g: &mut Grid, t: &Target, db: f64) {
    let (sin, cos) = t.angle_rad.sin_cos();
    let reach = (0.5 * t.length_px.hypot(t.width_px)).ceil() as isize;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (y, x) = (t.row as isize + dy, t.col as isize + dx);
            if y < 0 || x < 0 || y >= g.height() as isize || x >= g.width() as isize {
                continue;
            }
            let (fx, fy) = (dx as f64, dy as f64);
            let along = fx * cos + fy * sin;
            let across = -fx * sin + fy * cos;
            if along.abs() <= 0.5 * t.length_px && across.abs() <= 0.5 * t.width_px {
                g.set(y as usize, x as usize, db as f32);
            }
        }
    }
}
