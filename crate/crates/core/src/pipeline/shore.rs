use super::detect::Detection;
use super::scene::{bathy_cell, Grid, BATHY_SPACING_M};
use crate::error::{Error, Result};

/// Distance to land, in kilometres, for every bathymetry cell. A cell is land when
/// its elevation is ≥ 0. Distances are exact Euclidean distances between cell
/// centres; land cells are 0 and a grid without land is +∞ everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ShoreDistance {
    width: usize,
    height: usize,
    km: Vec<f64>,
}

impl ShoreDistance {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.km[row * self.width + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.km
    }

    /// Distance for a scene pixel position (10 m grid).
    pub fn at_pixel(&self, row: f64, col: f64) -> f64 {
        let (r, c) = bathy_cell(self.width, self.height, row, col);
        self.get(r, c)
    }
}

pub fn is_land(elevation_m: f32) -> bool {
    elevation_m >= 0.0
}

/// Exact Euclidean distance transform (lower envelope of parabolas, one pass per
/// axis), scaled by the 0.5 km cell spacing.
pub fn shore_distance(bathymetry: &Grid) -> ShoreDistance {
    let (w, h) = (bathymetry.width(), bathymetry.height());
    let mut sq: Vec<f64> = bathymetry
        .data()
        .iter()
        .map(|&v| if is_land(v) { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for c in 0..w {
        line.clear();
        line.extend((0..h).map(|r| sq[r * w + c]));
        edt_1d(&line, &mut out);
        for r in 0..h {
            sq[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        line.clear();
        line.extend_from_slice(&sq[r * w..(r + 1) * w]);
        edt_1d(&line, &mut out);
        sq[r * w..(r + 1) * w].copy_from_slice(&out);
    }
    let cell_km = BATHY_SPACING_M / 1000.0;
    ShoreDistance {
        width: w,
        height: h,
        km: sq.into_iter().map(|d| d.sqrt() * cell_km).collect(),
    }
}

/// `out[q] = min_p f[p] + (q − p)²` over a line.
fn edt_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    // Parabola vertices and the boundaries between them.
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = intersect(p, q);
            if s <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Fill `shore_km` for each detection from the cell under its centre.
pub fn attach_shore_distance(dets: &mut [Detection], shore: &ShoreDistance) {
    for d in dets {
        d.shore_km = Some(shore.at_pixel(d.row, d.col));
    }
}

pub(crate) fn require_shore(d: &Detection) -> Result<f64> {
    d.shore_km.ok_or_else(|| {
        Error::Usage(format!(
            "detection at ({}, {}) has no shore distance",
            d.row, d.col
        ))
    })
}
