use serde::Serialize;

use super::graph::{ModelGraph, Op};
use crate::error::Result;
use crate::tensor::output_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub params: u64,
    /// 2 × multiply-accumulates over the convolutions of one forward pass.
    pub flops: u64,
}

impl Counts {
    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Trainable parameters (conv weights, BN affine pairs or plain biases, and the DFL
/// projection bins) and conv FLOPs for a `height × width` input.
pub fn count_params_flops(g: &ModelGraph, height: usize, width: usize) -> Result<Counts> {
    let mut params = g.spec().reg_max as u64;
    let mut flops = 0u64;
    let mut dims = vec![(0usize, 0usize); g.nodes().len()];
    for (i, node) in g.nodes().iter().enumerate() {
        dims[i] = match &node.op {
            Op::Input => (height, width),
            Op::Conv(c) => {
                let (h, w) = dims[node.inputs[0]];
                let ho = output_extent("height", h, c.kernel, c.stride, c.padding())?;
                let wo = output_extent("width", w, c.kernel, c.stride, c.padding())?;
                let weights = (c.c_out * (c.c_in / c.groups) * c.kernel * c.kernel) as u64;
                let extra = if c.batch_norm { 2 * c.c_out } else { c.c_out };
                params += weights + extra as u64;
                flops += 2 * weights * (ho * wo) as u64;
                (ho, wo)
            }
            Op::Upsample => {
                let (h, w) = dims[node.inputs[0]];
                (2 * h, 2 * w)
            }
            _ => dims[node.inputs[0]],
        };
    }
    Ok(Counts { params, flops })
}

/// Parameter count of a standalone GhostConv with batch norm on both stages.
pub fn ghost_conv_params(c_in: usize, c_out: usize, k: usize) -> u64 {
    let half = c_out / 2;
    let cheap = c_out - half;
    let primary = half * c_in * k * k + 2 * half;
    let depthwise = cheap * 25 + 2 * cheap;
    (primary + depthwise) as u64
}
