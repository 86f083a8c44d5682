use super::graph::{ModelGraph, NodeId, Op};
use super::weights::{LayerWeights, WeightStore};
use crate::error::{Error, Result};
use crate::quant::{dequantize, qconv2d, quantize, QConvParams, QuantParams};
use crate::tensor::{
    activate_in_place, concat_channels, conv2d, depthwise_conv2d, fold_batchnorm, maxpool2d,
    upsample_nearest2x, Activation, ConvParams, Tensor,
};

/// Chip pixel values are divided by this before the stem.
pub const INPUT_SCALE: f32 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Float,
    Quantized,
}

/// Raw maps of one detection scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLevel {
    pub level: usize,
    pub stride: usize,
    /// `4·reg_max` channels: left, top, right, bottom bin logits.
    pub box_logits: Tensor,
    pub class_logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub levels: Vec<HeadLevel>,
}

impl HeadOutput {
    pub fn cells(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.class_logits.shape().plane())
            .sum()
    }
}

/// Hooks into a forward pass. Every method defaults to a no-op.
pub trait ForwardObserver {
    /// Called for each conv with its input and its output before the activation.
    fn conv(&mut self, _node: NodeId, _input: &Tensor, _pre_activation: &Tensor) {}
    /// Elements clamped to int8 while quantizing the input and requantizing the output.
    fn saturation(&mut self, _node: NodeId, _input: usize, _output: usize) {}
    fn output(&mut self, _node: NodeId, _value: &Tensor) {}
}

impl ForwardObserver for () {}

#[derive(Clone, Debug)]
pub(crate) struct IntegerConv {
    pub params: QConvParams,
    pub input: QuantParams,
    pub output: QuantParams,
}

#[derive(Clone, Debug)]
pub(crate) struct PreparedConv {
    /// BN-folded float parameters; for integer layers, their exact dequantized values.
    pub float: ConvParams,
    pub integer: Option<IntegerConv>,
    pub activation: Option<Activation>,
}

/// A graph with its weights prepared for execution: batch norm folded, integer layers
/// unpacked. Immutable and shareable across threads.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    graph: ModelGraph,
    convs: Vec<Option<PreparedConv>>,
    last_use: Vec<NodeId>,
}

impl LoadedModel {
    pub fn new(graph: ModelGraph, store: &WeightStore) -> Result<Self> {
        store.validate(&graph)?;
        let mut convs = vec![None; graph.nodes().len()];
        for (i, layer) in graph.conv_layers() {
            let w = store
                .get(&layer.name)
                .ok_or_else(|| Error::MissingWeights(layer.name.clone()))?;
            let (stride, padding, groups) = (layer.stride, layer.padding(), layer.groups);
            let prepared = match w {
                LayerWeights::Float(f) => {
                    let bias = f.bias.clone().unwrap_or_else(|| vec![0.0; layer.c_out]);
                    let p = ConvParams::new(f.kernel.clone(), f.kernel_shape, bias, stride, padding, groups)?;
                    let float = match &f.batch_norm {
                        Some(bn) => fold_batchnorm(&p, bn).map_err(|e| Error::LayerMismatch {
                            layer: layer.name.clone(),
                            reason: e.to_string(),
                        })?,
                        None => p,
                    };
                    PreparedConv {
                        float,
                        integer: None,
                        activation: layer.activation,
                    }
                }
                LayerWeights::Quantized(q) => {
                    let acc_scale = (-((q.input.fraction_bits() + q.weight.qp().fraction_bits()) as f64)).exp2();
                    let kernel = dequantize(&q.weight).into_data();
                    let bias = q.bias.iter().map(|&b| (b as f64 * acc_scale) as f32).collect();
                    let float = ConvParams::new(kernel, q.kernel_shape(), bias, stride, padding, groups)?;
                    let params = QConvParams {
                        weight: q.weight.clone(),
                        bias: q.bias.clone(),
                        stride,
                        padding,
                        groups,
                    };
                    PreparedConv {
                        float,
                        integer: Some(IntegerConv {
                            params,
                            input: q.input,
                            output: q.output,
                        }),
                        activation: layer.activation,
                    }
                }
            };
            convs[i] = Some(prepared);
        }
        let last_use = graph.last_uses();
        Ok(Self {
            graph,
            convs,
            last_use,
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn has_integer_layers(&self) -> bool {
        self.convs.iter().flatten().any(|c| c.integer.is_some())
    }

    /// BN-folded float parameters of the conv at `node`.
    pub fn folded_params(&self, node: NodeId) -> Option<&ConvParams> {
        self.convs.get(node)?.as_ref().map(|c| &c.float)
    }

    pub(crate) fn prepared(&self, node: NodeId) -> Option<&PreparedConv> {
        self.convs.get(node)?.as_ref()
    }

    pub fn forward(&self, chip: &Tensor, mode: Precision) -> Result<HeadOutput> {
        self.forward_observed(chip, mode, &mut ())
    }

    pub fn forward_observed(
        &self,
        chip: &Tensor,
        mode: Precision,
        obs: &mut dyn ForwardObserver,
    ) -> Result<HeadOutput> {
        let mut exec = Execution::new(self, chip, mode)?;
        while exec.step(obs)?.is_some() {}
        exec.finish()
    }
}

/// Node-by-node interpreter; values are dropped after their last consumer runs.
pub(crate) struct Execution<'m> {
    model: &'m LoadedModel,
    mode: Precision,
    input: Option<Tensor>,
    values: Vec<Option<Tensor>>,
    next: NodeId,
}

impl<'m> Execution<'m> {
    pub fn new(model: &'m LoadedModel, chip: &Tensor, mode: Precision) -> Result<Self> {
        let s = chip.shape();
        if s.channels != 3 {
            return Err(Error::Dimension {
                axis: "channels",
                expected: 3,
                found: s.channels,
            });
        }
        for (axis, v) in [("height", s.height), ("width", s.width)] {
            if v % 32 != 0 {
                return Err(Error::Dimension {
                    axis,
                    expected: v.div_ceil(32) * 32,
                    found: v,
                });
            }
        }
        if mode == Precision::Quantized && !model.has_integer_layers() {
            return Err(Error::Usage(
                "quantized execution needs a calibrated weight file".into(),
            ));
        }
        let mut input = chip.clone();
        input.data_mut().iter_mut().for_each(|v| *v /= INPUT_SCALE);
        Ok(Self {
            model,
            mode,
            input: Some(input),
            values: vec![None; model.graph.nodes().len()],
            next: 0,
        })
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node)?.as_ref()
    }

    /// Evaluate the next node and return its id, or `None` when the graph is done.
    pub fn step(&mut self, obs: &mut dyn ForwardObserver) -> Result<Option<NodeId>> {
        let i = self.next;
        let nodes = self.model.graph.nodes();
        if i >= nodes.len() {
            return Ok(None);
        }
        let node = &nodes[i];
        let arg = |k: usize| -> &Tensor {
            self.values[node.inputs[k]]
                .as_ref()
                .expect("inputs are evaluated before use")
        };
        let out = match &node.op {
            Op::Input => self.input.take().expect("single input node"),
            Op::Conv(_) => {
                let conv = self.model.convs[i].as_ref().expect("prepared conv");
                let x = arg(0);
                let mut y = match (&conv.integer, self.mode) {
                    (Some(q), Precision::Quantized) => {
                        let xq = quantize(x, q.input);
                        let yq = qconv2d(&xq, &q.params, q.output)?;
                        obs.saturation(i, xq.saturated(), yq.saturated());
                        dequantize(&yq)
                    }
                    _ if conv.float.groups > 1 && conv.float.groups == x.shape().channels => {
                        depthwise_conv2d(x, &conv.float)?
                    }
                    _ => conv2d(x, &conv.float)?,
                };
                obs.conv(i, x, &y);
                if let Some(act) = conv.activation {
                    activate_in_place(&mut y, act);
                }
                y
            }
            Op::MaxPool { kernel } => maxpool2d(arg(0), *kernel, 1, kernel / 2)?,
            Op::Upsample => upsample_nearest2x(arg(0)),
            Op::Concat => {
                let xs: Vec<&Tensor> = (0..node.inputs.len()).map(arg).collect();
                concat_channels(&xs)?
            }
            Op::Add => arg(0).add(arg(1))?,
            Op::Split { start, len } => arg(0).slice_channels(*start..start + len)?,
            Op::Repeat { channels } => arg(0).repeat_channels(*channels)?,
        };
        obs.output(i, &out);
        for &j in &node.inputs {
            if self.model.last_use[j] == i {
                self.values[j] = None;
            }
        }
        self.values[i] = Some(out);
        self.next += 1;
        Ok(Some(i))
    }

    pub fn finish(mut self) -> Result<HeadOutput> {
        let mut levels = Vec::new();
        for h in self.model.graph.heads() {
            let take = |v: &mut Vec<Option<Tensor>>, n: NodeId| {
                v[n].take()
                    .ok_or_else(|| Error::Invariant(format!("head node {n} was not evaluated")))
            };
            let box_logits = take(&mut self.values, h.box_node)?;
            let class_logits = take(&mut self.values, h.cls_node)?;
            levels.push(HeadLevel {
                level: h.level,
                stride: h.stride,
                box_logits,
                class_logits,
            });
        }
        Ok(HeadOutput { levels })
    }
}

/// GhostConv without activations: `concat(primary(x), cheap(primary(x)))`. A cheap
/// stage one channel wider than the primary sees the primary output with its
/// channels repeated cyclically.
pub fn ghost_conv(x: &Tensor, primary: &ConvParams, cheap: &ConvParams) -> Result<Tensor> {
    let half = primary.c_out();
    let wide = cheap.c_out();
    if wide != half && wide != half + 1 {
        return Err(Error::Config(format!(
            "ghost cheap stage has {wide} channels, primary has {half}"
        )));
    }
    let y = conv2d(x, primary)?;
    let cheap_in = if wide == half {
        y.clone()
    } else {
        y.repeat_channels(wide)?
    };
    let z = depthwise_conv2d(&cheap_in, cheap)?;
    concat_channels(&[&y, &z])
}
