use serde::Serialize;

use super::GraphSpec;
use crate::error::{Error, Result};
use crate::tensor::Activation;

pub type NodeId = usize;

/// One convolution module: conv followed by folded batch norm (or a plain bias) and
/// an optional activation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub batch_norm: bool,
    pub activation: Option<Activation>,
}

impl ConvLayer {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.kernel, self.kernel]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Op {
    Input,
    Conv(ConvLayer),
    /// Stride-1 max pool padded to keep the spatial size.
    MaxPool { kernel: usize },
    Upsample,
    Concat,
    Add,
    Split { start: usize, len: usize },
    /// Cyclic channel repetition, used to widen an odd Ghost cheap branch.
    Repeat { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
    /// Spatial downsampling factor relative to the network input.
    pub stride: usize,
}

/// A detection scale: the raw box-distribution and class-logit maps come out of
/// `box_node` and `cls_node`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSlot {
    pub level: usize,
    pub stride: usize,
    pub box_node: NodeId,
    pub cls_node: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    spec: GraphSpec,
    nodes: Vec<Node>,
    heads: Vec<HeadSlot>,
    pyramid: Vec<NodeId>,
    boundaries: Vec<bool>,
}

impl ModelGraph {
    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn heads(&self) -> &[HeadSlot] {
        &self.heads
    }

    /// Backbone stage outputs P1..P5, in order.
    pub fn pyramid(&self) -> &[NodeId] {
        &self.pyramid
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (NodeId, &ConvLayer)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Conv(c) => Some((i, c)),
            _ => None,
        })
    }

    pub fn conv_layer(&self, name: &str) -> Option<(NodeId, &ConvLayer)> {
        self.conv_layers().find(|(_, c)| c.name == name)
    }

    /// Whether the conv at `node` runs through the integer path in quantized mode.
    pub fn is_quant_boundary(&self, node: NodeId) -> bool {
        self.boundaries[node]
    }

    /// Index of the last node reading each node's output.
    pub(crate) fn last_uses(&self) -> Vec<NodeId> {
        let mut last: Vec<NodeId> = (0..self.nodes.len()).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                last[j] = last[j].max(i);
            }
        }
        for h in &self.heads {
            last[h.box_node] = usize::MAX;
            last[h.cls_node] = usize::MAX;
        }
        last
    }
}

struct Builder<'a> {
    spec: &'a GraphSpec,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn push(&mut self, op: Op, inputs: Vec<NodeId>, channels: usize, stride: usize) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            channels,
            stride,
        });
        self.nodes.len() - 1
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    #[allow(clippy::too_many_arguments)]
    fn raw_conv(
        &mut self,
        name: String,
        from: NodeId,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        batch_norm: bool,
        activation: Option<Activation>,
    ) -> NodeId {
        let src = self.node(from);
        let (c_in, in_stride) = (src.channels, src.stride);
        let layer = ConvLayer {
            name,
            c_in,
            c_out,
            kernel,
            stride,
            groups,
            batch_norm,
            activation,
        };
        self.push(Op::Conv(layer), vec![from], c_out, in_stride * stride)
    }

    fn conv(&mut self, name: String, from: NodeId, c_out: usize, k: usize, s: usize) -> NodeId {
        let act = Some(self.spec.activation);
        self.raw_conv(name, from, c_out, k, s, 1, true, act)
    }

    fn ghost_conv(
        &mut self,
        name: &str,
        from: NodeId,
        c_out: usize,
        k: usize,
        s: usize,
        act: bool,
    ) -> Result<NodeId> {
        let half = c_out / 2;
        if half == 0 {
            return Err(Error::Config(format!(
                "{name}: GhostConv needs at least 2 output channels, got {c_out}"
            )));
        }
        let cheap_c = c_out - half;
        let act = act.then_some(self.spec.activation);
        let primary = self.raw_conv(format!("{name}.primary"), from, half, k, s, 1, true, act);
        let cheap_in = if cheap_c == half {
            primary
        } else {
            let st = self.node(primary).stride;
            self.push(Op::Repeat { channels: cheap_c }, vec![primary], cheap_c, st)
        };
        let cheap = self.raw_conv(
            format!("{name}.cheap"),
            cheap_in,
            cheap_c,
            5,
            1,
            cheap_c,
            true,
            act,
        );
        Ok(self.concat(vec![primary, cheap]))
    }

    fn concat(&mut self, inputs: Vec<NodeId>) -> NodeId {
        let channels = inputs.iter().map(|&i| self.node(i).channels).sum();
        let stride = self.node(inputs[0]).stride;
        debug_assert!(inputs.iter().all(|&i| self.node(i).stride == stride));
        self.push(Op::Concat, inputs, channels, stride)
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (c, s) = (self.node(a).channels, self.node(a).stride);
        self.push(Op::Add, vec![a, b], c, s)
    }

    /// Stride-2 3×3 downsampling conv, Ghost when enabled.
    fn down(&mut self, name: &str, from: NodeId, c_out: usize) -> Result<NodeId> {
        if self.spec.use_ghost {
            self.ghost_conv(name, from, c_out, 3, 2, true)
        } else {
            Ok(self.conv(name.to_string(), from, c_out, 3, 2))
        }
    }

    /// Residual unit on `c` channels. `c3_style` selects the 1×1→3×3 kernel pair of
    /// the C3 bottleneck over the 3×3→3×3 pair of C2f.
    fn bottleneck(&mut self, name: &str, from: NodeId, shortcut: bool, c3_style: bool) -> Result<NodeId> {
        let c = self.node(from).channels;
        if self.spec.use_ghost {
            let h = self.ghost_conv(&format!("{name}.cv1"), from, c / 2, 1, 1, true)?;
            let y = self.ghost_conv(&format!("{name}.cv2"), h, c, 1, 1, false)?;
            return Ok(self.add(from, y));
        }
        let k1 = if c3_style { 1 } else { 3 };
        let h = self.conv(format!("{name}.cv1"), from, c, k1, 1);
        let y = self.conv(format!("{name}.cv2"), h, c, 3, 1);
        Ok(if shortcut { self.add(from, y) } else { y })
    }

    fn c2f(&mut self, name: &str, from: NodeId, c_out: usize, n: usize, shortcut: bool) -> Result<NodeId> {
        let c = c_out / 2;
        let cv1 = self.conv(format!("{name}.cv1"), from, 2 * c, 1, 1);
        let st = self.node(cv1).stride;
        let a = self.push(Op::Split { start: 0, len: c }, vec![cv1], c, st);
        let b = self.push(Op::Split { start: c, len: c }, vec![cv1], c, st);
        let mut parts = vec![a, b];
        for i in 0..n {
            let last = *parts.last().expect("non-empty");
            parts.push(self.bottleneck(&format!("{name}.m.{i}"), last, shortcut, false)?);
        }
        let cat = self.concat(parts);
        Ok(self.conv(format!("{name}.cv2"), cat, c_out, 1, 1))
    }

    fn c3(&mut self, name: &str, from: NodeId, c_out: usize, n: usize, shortcut: bool) -> Result<NodeId> {
        let c = c_out / 2;
        let mut m = self.conv(format!("{name}.cv1"), from, c, 1, 1);
        let side = self.conv(format!("{name}.cv2"), from, c, 1, 1);
        for i in 0..n {
            m = self.bottleneck(&format!("{name}.m.{i}"), m, shortcut, true)?;
        }
        let cat = self.concat(vec![m, side]);
        Ok(self.conv(format!("{name}.cv3"), cat, c_out, 1, 1))
    }

    fn block(&mut self, name: &str, from: NodeId, c_out: usize, base_n: usize, shortcut: bool) -> Result<NodeId> {
        let n = self.spec.repeats(base_n);
        if self.spec.use_c3 {
            self.c3(name, from, c_out, n, shortcut)
        } else {
            self.c2f(name, from, c_out, n, shortcut)
        }
    }

    fn sppf(&mut self, name: &str, from: NodeId, c_out: usize) -> NodeId {
        let c = self.node(from).channels / 2;
        let x = self.conv(format!("{name}.cv1"), from, c, 1, 1);
        let st = self.node(x).stride;
        let y1 = self.push(Op::MaxPool { kernel: 5 }, vec![x], c, st);
        let y2 = self.push(Op::MaxPool { kernel: 5 }, vec![y1], c, st);
        let y3 = self.push(Op::MaxPool { kernel: 5 }, vec![y2], c, st);
        let cat = self.concat(vec![x, y1, y2, y3]);
        self.conv(format!("{name}.cv2"), cat, c_out, 1, 1)
    }

    fn up_concat(&mut self, low: NodeId, skip: NodeId) -> NodeId {
        let (c, s) = (self.node(low).channels, self.node(low).stride);
        let up = self.push(Op::Upsample, vec![low], c, s / 2);
        self.concat(vec![up, skip])
    }
}

/// Expand a spec into its layer graph.
pub fn build_model(spec: &GraphSpec) -> Result<ModelGraph> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        nodes: Vec::new(),
    };
    let ch = |c| spec.channels(c);

    let input = b.push(Op::Input, vec![], 3, 1);
    let p1 = b.conv("backbone.0".into(), input, ch(64), 3, 2);
    let x = b.down("backbone.1", p1, ch(128))?;
    let p2 = b.block("backbone.2", x, ch(128), 3, true)?;
    let x = b.down("backbone.3", p2, ch(256))?;
    let p3 = b.block("backbone.4", x, ch(256), 6, true)?;
    let x = b.down("backbone.5", p3, ch(512))?;
    let p4 = b.block("backbone.6", x, ch(512), 6, true)?;
    let x = b.down("backbone.7", p4, ch(1024))?;
    let x = b.block("backbone.8", x, ch(1024), 3, true)?;
    let p5 = b.sppf("backbone.9", x, ch(1024));

    let cat = b.up_concat(p5, p4);
    let td4 = b.block("neck.td4", cat, ch(512), 3, false)?;
    let cat = b.up_concat(td4, p3);
    let td3 = b.block("neck.td3", cat, ch(256), 3, false)?;

    let mut outs = Vec::new();
    let out3 = if spec.use_p2 {
        let cat = b.up_concat(td3, p2);
        let out2 = b.block("neck.td2", cat, ch(128), 3, false)?;
        outs.push((2, out2));
        let d = b.down("neck.down2", out2, ch(128))?;
        let cat = b.concat(vec![d, td3]);
        b.block("neck.bu3", cat, ch(256), 3, false)?
    } else {
        td3
    };
    outs.push((3, out3));
    let d = b.down("neck.down3", out3, ch(256))?;
    let cat = b.concat(vec![d, td4]);
    let out4 = b.block("neck.bu4", cat, ch(512), 3, false)?;
    outs.push((4, out4));
    let d = b.down("neck.down4", out4, ch(512))?;
    let cat = b.concat(vec![d, p5]);
    let out5 = b.block("neck.bu5", cat, ch(1024), 3, false)?;
    outs.push((5, out5));

    let c0 = b.node(outs[0].1).channels;
    let box_c = 16.max(c0 / 4).max(4 * spec.reg_max);
    let cls_c = c0.max(spec.num_classes.min(100));
    let mut heads = Vec::new();
    for (level, from) in outs {
        let stride = b.node(from).stride;
        let branch = |b: &mut Builder, kind: &str, hidden: usize, out: usize| {
            let h = b.conv(format!("head.p{level}.{kind}.0"), from, hidden, 3, 1);
            let h = b.conv(format!("head.p{level}.{kind}.1"), h, hidden, 3, 1);
            b.raw_conv(format!("head.p{level}.{kind}.2"), h, out, 1, 1, 1, false, None)
        };
        let box_node = branch(&mut b, "box", box_c, 4 * spec.reg_max);
        let cls_node = branch(&mut b, "cls", cls_c, spec.num_classes);
        heads.push(HeadSlot {
            level,
            stride,
            box_node,
            cls_node,
        });
    }

    let nodes = b.nodes;
    let boundaries = resolve_boundaries(spec, &nodes)?;
    // P1 comes from the stem; the block outputs stand for P2..P4 and SPPF for P5.
    let pyramid = vec![p1, p2, p3, p4, p5];
    Ok(ModelGraph {
        spec: spec.clone(),
        nodes,
        heads,
        pyramid,
        boundaries,
    })
}

fn resolve_boundaries(spec: &GraphSpec, nodes: &[Node]) -> Result<Vec<bool>> {
    let mut flags: Vec<bool> = nodes.iter().map(|n| matches!(n.op, Op::Conv(_))).collect();
    if spec.quant_boundaries.is_empty() {
        return Ok(flags);
    }
    let covers = |entry: &str, name: &str| {
        name == entry || (name.starts_with(entry) && name.as_bytes().get(entry.len()) == Some(&b'.'))
    };
    for entry in &spec.quant_boundaries {
        let hit = nodes.iter().any(|n| matches!(&n.op, Op::Conv(c) if covers(entry, &c.name)));
        if !hit {
            return Err(Error::Config(format!(
                "quantization boundary `{entry}` names no convolution layer"
            )));
        }
    }
    for (flag, n) in flags.iter_mut().zip(nodes) {
        if let Op::Conv(c) = &n.op {
            *flag = spec.quant_boundaries.iter().any(|e| covers(e, &c.name));
        }
    }
    Ok(flags)
}
