use serde::Serialize;

use super::forward::{ForwardObserver, LoadedModel, Precision};
use super::graph::{NodeId, Op};
use super::weights::{FloatLayer, LayerWeights, QuantLayer, WeightStore};
use crate::error::{Error, Result};
use crate::quant::{quantize, Calibrator, QuantParams};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCalibration {
    pub name: String,
    pub input_bits: u8,
    pub weight_bits: u8,
    pub output_bits: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CalibrationStats {
    pub chips: usize,
    pub layers: Vec<LayerCalibration>,
}

struct Collector<'a> {
    wanted: &'a [bool],
    input: Vec<Calibrator>,
    output: Vec<Calibrator>,
}

impl ForwardObserver for Collector<'_> {
    fn conv(&mut self, node: NodeId, input: &Tensor, pre: &Tensor) {
        if self.wanted[node] {
            self.input[node].observe_tensor(input);
            self.output[node].observe_tensor(pre);
        }
    }
}

/// Post-training quantization of a float model.
///
/// Chips run through the float model one at a time, in order. Every boundary conv
/// gets the MSE-optimal fraction bits for its input, its BN-folded kernel and its
/// pre-activation output; the output is capped at `f_in + f_w` so requantization is
/// a right shift, and the weight bits shrink until the int32 bias and accumulator
/// cannot overflow and the bias is an integer an f32 holds exactly. Non-boundary
/// layers are written back folded, in float.
pub fn calibrate(model: &LoadedModel, chips: &[Tensor]) -> Result<(WeightStore, CalibrationStats)> {
    if model.has_integer_layers() {
        return Err(Error::Usage("weights are already quantized".into()));
    }
    if chips.is_empty() {
        return Err(Error::Usage("calibration needs at least one chip".into()));
    }
    let g = model.graph();
    let n = g.nodes().len();
    let wanted: Vec<bool> = (0..n).map(|i| g.is_quant_boundary(i)).collect();
    let mut col = Collector {
        wanted: &wanted,
        input: vec![Calibrator::new(); n],
        output: vec![Calibrator::new(); n],
    };
    for chip in chips {
        model.forward_observed(chip, Precision::Float, &mut col)?;
    }

    let mut store = WeightStore::new();
    let mut stats = CalibrationStats {
        chips: chips.len(),
        layers: Vec::new(),
    };
    for (i, node) in g.nodes().iter().enumerate() {
        let Op::Conv(layer) = &node.op else { continue };
        let p = model
            .folded_params(i)
            .ok_or_else(|| Error::Invariant(format!("{} has no parameters", layer.name)))?;
        if !wanted[i] {
            store.insert(
                layer.name.clone(),
                LayerWeights::Float(FloatLayer {
                    kernel: p.kernel.clone(),
                    kernel_shape: p.kernel_shape,
                    bias: Some(p.bias.clone()),
                    batch_norm: None,
                }),
            );
            continue;
        }
        let input = col.input[i].best();
        let mut kcal = Calibrator::new();
        kcal.observe(&p.kernel);
        let fan_in = (p.kernel_shape[1] * p.kernel_shape[2] * p.kernel_shape[3]) as i64;
        // Bias values are stored as f32 in weight files, so they must also stay
        // within the f32 integer range.
        let headroom = (i32::MAX as i64 - 128 * 128 * fan_in).min(1 << 24);
        let mut wbits = kcal.best().fraction_bits();
        let bias = loop {
            let shift = input.fraction_bits() as i32 + wbits as i32;
            let scaled: Vec<f64> = p.bias.iter().map(|&b| (b as f64 * (shift as f64).exp2()).round()).collect();
            if scaled.iter().all(|b| b.abs() <= headroom as f64) {
                break scaled.into_iter().map(|b| b as i32).collect::<Vec<i32>>();
            }
            if wbits == 0 {
                return Err(Error::Numeric(format!(
                    "{}: bias cannot be represented in int32 at input fraction bits {}",
                    layer.name,
                    input.fraction_bits()
                )));
            }
            wbits -= 1;
        };
        let wqp = QuantParams::new(wbits)?;
        let out_bits = col.output[i]
            .best()
            .fraction_bits()
            .min(input.fraction_bits() + wbits);
        let output = QuantParams::new(out_bits)?;
        let [co, cig, kh, kw] = p.kernel_shape;
        let kernel = Tensor::new(Shape::new(co, cig, kh, kw), p.kernel.clone())?;
        store.insert(
            layer.name.clone(),
            LayerWeights::Quantized(QuantLayer {
                weight: quantize(&kernel, wqp),
                bias,
                input,
                output,
            }),
        );
        stats.layers.push(LayerCalibration {
            name: layer.name.clone(),
            input_bits: input.fraction_bits(),
            weight_bits: wbits,
            output_bits: out_bits,
        });
    }
    Ok((store, stats))
}
