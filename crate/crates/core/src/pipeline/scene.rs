use crate::error::{Error, Result};

/// SAR pixel spacing in metres.
pub const PIXEL_SPACING_M: f64 = 10.0;
/// Bathymetry cell spacing in metres.
pub const BATHY_SPACING_M: f64 = 500.0;
/// SAR pixels per bathymetry cell along each axis.
pub const BATHY_FACTOR: usize = 50;

pub const DB_RANGE: (f32, f32) = (-50.0, 20.0);
pub const DEPTH_RANGE: (f32, f32) = (-6000.0, 2000.0);

/// Row-major 2-D float grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension {
                axis: "data",
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// A full scene: VV and VH backscatter in dB on the 10 m grid and bathymetry in
/// metres on the 500 m grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRaster {
    pub scene_id: String,
    pub vv: Grid,
    pub vh: Grid,
    pub bathymetry: Grid,
}

impl SceneRaster {
    pub fn new(scene_id: impl Into<String>, vv: Grid, vh: Grid, bathymetry: Grid) -> Result<Self> {
        if vv.width != vh.width {
            return Err(Error::Dimension {
                axis: "width",
                expected: vv.width,
                found: vh.width,
            });
        }
        if vv.height != vh.height {
            return Err(Error::Dimension {
                axis: "height",
                expected: vv.height,
                found: vh.height,
            });
        }
        if vv.width == 0 || vv.height == 0 {
            return Err(Error::Dimension {
                axis: "width",
                expected: 1,
                found: 0,
            });
        }
        for (axis, scene, bathy) in [
            ("bathy_width", vv.width, bathymetry.width),
            ("bathy_height", vv.height, bathymetry.height),
        ] {
            let ideal = scene as f64 / BATHY_FACTOR as f64;
            if bathy == 0 || (bathy as f64 - ideal).abs() > 1.0 {
                return Err(Error::Dimension {
                    axis,
                    expected: ideal.round() as usize,
                    found: bathy,
                });
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            vv,
            vh,
            bathymetry,
        })
    }

    pub fn width(&self) -> usize {
        self.vv.width
    }

    pub fn height(&self) -> usize {
        self.vv.height
    }

    /// Bathymetry cell under a scene pixel, clamped to the grid.
    pub fn bathy_cell(&self, row: f64, col: f64) -> (usize, usize) {
        bathy_cell(self.bathymetry.width, self.bathymetry.height, row, col)
    }
}

pub(crate) fn bathy_cell(width: usize, height: usize, row: f64, col: f64) -> (usize, usize) {
    let idx = |v: f64, n: usize| {
        let i = (v.max(0.0) / BATHY_FACTOR as f64).floor() as usize;
        i.min(n - 1)
    };
    (idx(row, height), idx(col, width))
}

/// Clamp to `range` and map linearly onto [0, 255]; NaN becomes 0.
pub fn normalize_value(v: f32, range: (f32, f32)) -> f32 {
    if v.is_nan() {
        return 0.0;
    }
    let (lo, hi) = range;
    let c = v.clamp(lo, hi) as f64;
    ((c - lo as f64) / (hi as f64 - lo as f64) * 255.0) as f32
}

/// VV/VH clipped to [−50, 20] dB and bathymetry to [−6000, 2000] m, each mapped to
/// [0, 255].
pub fn normalize_scene(s: &SceneRaster) -> SceneRaster {
    SceneRaster {
        scene_id: s.scene_id.clone(),
        vv: s.vv.map(|v| normalize_value(v, DB_RANGE)),
        vh: s.vh.map(|v| normalize_value(v, DB_RANGE)),
        bathymetry: s.bathymetry.map(|v| normalize_value(v, DEPTH_RANGE)),
    }
}

/// Nearest-neighbour upsampling of the bathymetry grid to the scene grid.
pub fn resample_bathymetry(s: &SceneRaster) -> Grid {
    let (w, h) = (s.width(), s.height());
    let b = &s.bathymetry;
    let cols: Vec<usize> = (0..w).map(|c| (c / BATHY_FACTOR).min(b.width - 1)).collect();
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        let src = b.row((r / BATHY_FACTOR).min(b.height - 1));
        data.extend(cols.iter().map(|&c| src[c]));
    }
    Grid {
        width: w,
        height: h,
        data,
    }
}
