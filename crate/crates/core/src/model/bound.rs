//! Worst-case error of the integer path against the float path of the same model.
//!
//! Bounds are sup-norm, propagated node by node: a conv multiplies the incoming error
//! by its largest per-output-channel L1 weight norm and adds the input quantization
//! step, the requantization step and any saturation excess; activations scale by
//! their Lipschitz constant; pooling, resampling and channel selection pass the error
//! through; concat takes the worst input and add sums them. Every f32 rounding on
//! either side adds a few units in the last place of the magnitudes seen on the
//! float reference run. Because the per-layer L1 norms multiply, this end-to-end
//! bound grows geometrically with depth and is loose for deep graphs.
//!
//! [`check_quantized`] adds a local check per integer conv: float and integer conv
//! are fed the same input (the one the quantized pass actually produced), so only
//! that layer's own rounding and saturation enter its bound.

use super::forward::{Execution, ForwardObserver, LoadedModel, Precision};
use super::graph::{NodeId, Op};
use crate::error::{Error, Result};
use crate::quant::{dequantize, qconv2d, quantize};
use crate::tensor::{conv2d, Tensor};

const ULP: f64 = 1.0 / (1u64 << 24) as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorBounds {
    /// Bound on `max |quantized − float|` for every node output.
    pub per_node: Vec<f64>,
}

impl ErrorBounds {
    pub fn node(&self, id: NodeId) -> f64 {
        self.per_node[id]
    }
}

/// Pre-activation comparison of one integer conv against its float twin on a shared
/// input.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCheck {
    pub observed: f64,
    pub bound: f64,
    /// Elements clamped while quantizing the input or requantizing the output.
    pub saturated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeCheck {
    pub node: NodeId,
    pub label: String,
    pub observed: f64,
    pub bound: f64,
    pub local: Option<LocalCheck>,
}

impl NodeCheck {
    pub fn holds(&self) -> bool {
        self.observed <= self.bound
            && self.local.as_ref().is_none_or(|l| l.observed <= l.bound)
    }
}

#[derive(Default)]
struct Magnitudes {
    conv_input: Vec<f64>,
    pre_activation: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardObserver for Magnitudes {
    fn conv(&mut self, node: NodeId, input: &Tensor, pre: &Tensor) {
        self.conv_input[node] = input.max_abs() as f64;
        self.pre_activation[node] = pre.max_abs() as f64;
    }

    fn output(&mut self, node: NodeId, value: &Tensor) {
        self.output[node] = value.max_abs() as f64;
    }
}

/// Interval bounds for `chip`, using magnitudes from a float reference pass.
pub fn error_bounds(model: &LoadedModel, chip: &Tensor) -> Result<ErrorBounds> {
    let g = model.graph();
    let n = g.nodes().len();
    let mut mags = Magnitudes {
        conv_input: vec![0.0; n],
        pre_activation: vec![0.0; n],
        output: vec![0.0; n],
    };
    model.forward_observed(chip, Precision::Float, &mut mags)?;

    let mut e = vec![0f64; n];
    for (i, node) in g.nodes().iter().enumerate() {
        let ein = |k: usize| e[node.inputs[k]];
        e[i] = match &node.op {
            Op::Input => 0.0,
            Op::MaxPool { .. } | Op::Upsample | Op::Split { .. } | Op::Repeat { .. } => ein(0),
            Op::Concat => node.inputs.iter().map(|&j| e[j]).fold(0.0, f64::max),
            Op::Add => {
                let s = ein(0) + ein(1);
                s + 2.0 * ULP * (mags.output[i] + s)
            }
            Op::Conv(_) => {
                let conv = model
                    .prepared(i)
                    .ok_or_else(|| Error::Invariant(format!("node {i} has no conv")))?;
                let l1 = max_l1(&conv.float.kernel, conv.float.c_out());
                let m_in = mags.conv_input[i];
                let m_pre = mags.pre_activation[i];
                let e_in = ein(0);
                let accumulate = 1e-12 * l1 * (m_in + e_in);
                let e_pre = match &conv.integer {
                    Some(q) => {
                        let step_in = q.input.scale();
                        let sat_in = (m_in + e_in - q.input.max_value()).max(0.0);
                        let r = e_in + 0.5 * step_in + sat_in;
                        let shift = q.input.fraction_bits() as i32
                            + q.params.weight.qp().fraction_bits() as i32
                            - q.output.fraction_bits() as i32;
                        let round_out = if shift > 0 { 0.5 * q.output.scale() } else { 0.0 };
                        let sat_out = (m_pre + l1 * r - q.output.max_value()).max(0.0);
                        let max_bias = conv.float.bias.iter().fold(0f64, |m, b| m.max(b.abs() as f64));
                        l1 * r + round_out + sat_out + ULP * (max_bias + m_pre) + accumulate
                    }
                    None => l1 * e_in + 2.0 * ULP * (m_pre + l1 * e_in) + accumulate,
                };
                match conv.activation {
                    Some(act) => act.lipschitz() * e_pre + 8.0 * ULP * (m_pre + e_pre),
                    None => e_pre,
                }
            }
        };
    }
    Ok(ErrorBounds { per_node: e })
}

fn max_l1(kernel: &[f32], c_out: usize) -> f64 {
    let per = kernel.len() / c_out;
    kernel
        .chunks(per)
        .map(|row| row.iter().map(|w| w.abs() as f64).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Run the float and quantized passes in lockstep and compare every node output
/// against its bound.
pub fn check_quantized(model: &LoadedModel, chip: &Tensor) -> Result<Vec<NodeCheck>> {
    let bounds = error_bounds(model, chip)?;
    let mut float = Execution::new(model, chip, Precision::Float)?;
    let mut quant = Execution::new(model, chip, Precision::Quantized)?;
    let mut checks = Vec::new();
    let nodes = model.graph().nodes();
    for i in 0..nodes.len() {
        let local = match model.prepared(i).and_then(|c| c.integer.as_ref().map(|q| (c, q))) {
            Some((conv, q)) => {
                let x = quant
                    .value(nodes[i].inputs[0])
                    .ok_or_else(|| Error::Invariant(format!("node {i} input missing")))?;
                let reference = conv2d(x, &conv.float)?;
                let xq = quantize(x, q.input);
                let yq = qconv2d(&xq, &q.params, q.output)?;
                let observed = max_diff(&reference, &dequantize(&yq));
                let l1 = max_l1(&conv.float.kernel, conv.float.c_out());
                let m_in = x.max_abs() as f64;
                let m_pre = reference.max_abs() as f64;
                let r = 0.5 * q.input.scale() + (m_in - q.input.max_value()).max(0.0);
                let shift = q.input.fraction_bits() as i32
                    + q.params.weight.qp().fraction_bits() as i32
                    - q.output.fraction_bits() as i32;
                let round_out = if shift > 0 { 0.5 * q.output.scale() } else { 0.0 };
                let sat_out = (m_pre + l1 * r - q.output.max_value()).max(0.0);
                let max_bias = conv.float.bias.iter().fold(0f64, |m, b| m.max(b.abs() as f64));
                let bound = l1 * r + round_out + sat_out + ULP * (max_bias + m_pre) + 1e-12 * l1 * m_in;
                Some(LocalCheck {
                    observed,
                    bound,
                    saturated: xq.saturated() + yq.saturated(),
                })
            }
            None => None,
        };
        float.step(&mut ())?;
        quant.step(&mut ())?;
        let (a, b) = match (float.value(i), quant.value(i)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Invariant(format!("node {i} missing after step"))),
        };
        let observed = max_diff(a, b);
        let label = match &model.graph().nodes()[i].op {
            Op::Conv(c) => c.name.clone(),
            other => format!("#{i} {other:?}"),
        };
        checks.push(NodeCheck {
            node: i,
            label,
            observed,
            bound: bounds.node(i),
            local,
        });
    }
    Ok(checks)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()))
}
