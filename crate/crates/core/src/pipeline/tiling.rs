use super::scene::{resample_bathymetry, Grid, SceneRaster};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHIP_SIZE: usize = 800;

/// One fixed-size model input cut from a normalized scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    /// `(1, 3, 800, 800)`: VV, VH, bathymetry.
    pub pixels: Tensor,
    /// Scene `(row, col)` of the chip's top-left pixel.
    pub origin: (usize, usize),
    pub chip_index: usize,
}

/// Chip start offsets along one axis. The last chip is aligned with the far edge;
/// an axis shorter than a chip gets a single chip at 0.
pub fn tile_offsets(len: usize, chip: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap >= chip {
        return Err(Error::Config(format!(
            "overlap {overlap} must be smaller than the chip size {chip}"
        )));
    }
    if len <= chip {
        return Ok(vec![0]);
    }
    let stride = chip - overlap;
    let last = len - chip;
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o < last).collect();
    out.push(last);
    Ok(out)
}

/// Row-major chip origins for a `height × width` scene.
pub fn chip_origins(height: usize, width: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    let rows = tile_offsets(height, CHIP_SIZE, overlap)?;
    let cols = tile_offsets(width, CHIP_SIZE, overlap)?;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// A normalized scene with its bathymetry on the scene grid, ready to be cut.
#[derive(Clone, Debug)]
pub struct ChipSource {
    vv: Grid,
    vh: Grid,
    bathymetry: Grid,
    origins: Vec<(usize, usize)>,
}

impl ChipSource {
    /// `normalized` must already be mapped onto [0, 255].
    pub fn new(normalized: &SceneRaster, overlap: usize) -> Result<Self> {
        let origins = chip_origins(normalized.height(), normalized.width(), overlap)?;
        Ok(Self {
            vv: normalized.vv.clone(),
            vh: normalized.vh.clone(),
            bathymetry: resample_bathymetry(normalized),
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    /// Cut chip `index`; pixels past the scene edge are zero.
    pub fn chip(&self, index: usize) -> Chip {
        let (r0, c0) = self.origins[index];
        let mut pixels = Tensor::zeros(Shape::new(1, 3, CHIP_SIZE, CHIP_SIZE));
        let rows = CHIP_SIZE.min(self.vv.height() - r0);
        let cols = CHIP_SIZE.min(self.vv.width() - c0);
        let plane = CHIP_SIZE * CHIP_SIZE;
        let data = pixels.data_mut();
        for (ch, grid) in [&self.vv, &self.vh, &self.bathymetry].into_iter().enumerate() {
            for r in 0..rows {
                let src = &grid.row(r0 + r)[c0..c0 + cols];
                let at = ch * plane + r * CHIP_SIZE;
                data[at..at + cols].copy_from_slice(src);
            }
        }
        Chip {
            pixels,
            origin: (r0, c0),
            chip_index: index,
        }
    }
}

/// All chips of a normalized scene in row-major order.
pub fn tile_scene(normalized: &SceneRaster, overlap: usize) -> Result<Vec<Chip>> {
    let src = ChipSource::new(normalized, overlap)?;
    Ok((0..src.len()).map(|i| src.chip(i)).collect())
}
