//! The YOLOv8 detector family as a declarative layer graph.
//!
//! A [`GraphSpec`] picks the variant and its modifications (Ghost convolutions, C3
//! blocks, the stride-4 P2 branch, the activation). [`build_model`] expands it into a
//! topologically ordered [`ModelGraph`] whose convolution layers carry stable names;
//! weights are attached by name through a [`WeightStore`].

mod bound;
mod calibrate;
mod count;
mod forward;
mod graph;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

pub use bound::{check_quantized, error_bounds, ErrorBounds, LocalCheck, NodeCheck};
pub use calibrate::{calibrate, CalibrationStats};
pub use count::{count_params_flops, ghost_conv_params, Counts};
pub use forward::{ghost_conv, ForwardObserver, HeadLevel, HeadOutput, LoadedModel, Precision};
pub use graph::{build_model, ConvLayer, HeadSlot, ModelGraph, Node, NodeId, Op};
pub use weights::{FloatLayer, LayerWeights, QuantLayer, WeightStore, BN_EPSILON};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    N,
    S,
}

impl Variant {
    /// Standard `(depth, width)` multiples.
    pub fn multiples(self) -> (f64, f64) {
        match self {
            Variant::N => (0.33, 0.25),
            Variant::S => (0.33, 0.50),
        }
    }
}

fn default_activation() -> Activation {
    Activation::SiLU
}

fn default_max_channels() -> usize {
    1024
}

fn default_reg_max() -> usize {
    16
}

fn default_num_classes() -> usize {
    NUM_CLASSES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub variant: Variant,
    #[serde(default)]
    pub use_ghost: bool,
    #[serde(default)]
    pub use_p2: bool,
    #[serde(default)]
    pub use_c3: bool,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub depth_multiple: f64,
    pub width_multiple: f64,
    #[serde(default = "default_max_channels")]
    pub max_channels: usize,
    /// DFL bins per box side.
    #[serde(default = "default_reg_max")]
    pub reg_max: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Convolutions that run through the integer path in quantized mode. An entry
    /// names a layer or a prefix of layers (`"backbone.2"` covers every conv inside
    /// that block). Empty means every convolution.
    #[serde(default)]
    pub quant_boundaries: Vec<String>,
}

impl GraphSpec {
    pub fn new(variant: Variant) -> Self {
        let (depth_multiple, width_multiple) = variant.multiples();
        Self {
            variant,
            use_ghost: false,
            use_p2: false,
            use_c3: false,
            activation: default_activation(),
            depth_multiple,
            width_multiple,
            max_channels: default_max_channels(),
            reg_max: default_reg_max(),
            num_classes: NUM_CLASSES,
            quant_boundaries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.reg_max == 0 {
            return Err(Error::Config("reg_max must be >= 1".into()));
        }
        for (name, v) in [
            ("depth_multiple", self.depth_multiple),
            ("width_multiple", self.width_multiple),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_channels < 8 {
            return Err(Error::Config(format!(
                "max_channels must be >= 8, got {}",
                self.max_channels
            )));
        }
        Ok(())
    }

    /// Scaled channel count, rounded up to a multiple of 8.
    pub fn channels(&self, base: usize) -> usize {
        let c = base.min(self.max_channels) as f64 * self.width_multiple;
        ((c / 8.0).ceil() as usize * 8).max(8)
    }

    /// Scaled block repeat count.
    pub fn repeats(&self, base: usize) -> usize {
        ((base as f64 * self.depth_multiple).round() as usize).max(1)
    }
}

/// Preset names such as `yolov8n`, `yolov8n-ghost-p2` or `yolov8s-ghost-p2-hardswish`.
///
/// `ghost` implies C3 blocks (C3Ghost); `c2f` after it switches back to C2f.
impl FromStr for GraphSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('-');
        let head = parts.next().unwrap_or_default();
        let variant = match head.to_ascii_lowercase().as_str() {
            "yolov8n" => Variant::N,
            "yolov8s" => Variant::S,
            _ => return Err(Error::Config(format!("unknown model preset `{s}`"))),
        };
        let mut spec = GraphSpec::new(variant);
        for part in parts {
            match part.to_ascii_lowercase().as_str() {
                "ghost" => {
                    spec.use_ghost = true;
                    spec.use_c3 = true;
                }
                "p2" => spec.use_p2 = true,
                "c3" => spec.use_c3 = true,
                "c2f" => spec.use_c3 = false,
                "hardswish" | "hswish" => spec.activation = Activation::HardSwish,
                "silu" => spec.activation = Activation::SiLU,
                other => {
                    return Err(Error::Config(format!(
                        "unknown modifier `{other}` in model preset `{s}`"
                    )))
                }
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.variant {
            Variant::N => "n",
            Variant::S => "s",
        };
        write!(f, "yolov8{v}")?;
        if self.use_ghost {
            f.write_str("-ghost")?;
            if !self.use_c3 {
                f.write_str("-c2f")?;
            }
        } else if self.use_c3 {
            f.write_str("-c3")?;
        }
        if self.use_p2 {
            f.write_str("-p2")?;
        }
        if self.activation == Activation::HardSwish {
            f.write_str("-hardswish")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        let s: GraphSpec = "yolov8n-ghost-p2".parse().unwrap();
        assert!(s.use_ghost && s.use_c3 && s.use_p2);
        assert_eq!(s.width_multiple, 0.25);
        let s: GraphSpec = "yolov8s-ghost-c2f".parse().unwrap();
        assert!(s.use_ghost && !s.use_c3);
        assert_eq!(s.width_multiple, 0.5);
        assert!("yolov8x".parse::<GraphSpec>().is_err());
        assert!("yolov8n-attention".parse::<GraphSpec>().is_err());
    }

    #[test]
    fn preset_display_round_trips() {
        for name in [
            "yolov8n",
            "yolov8s-c3",
            "yolov8n-ghost",
            "yolov8n-ghost-c2f-p2",
            "yolov8s-ghost-p2-hardswish",
        ] {
            let spec: GraphSpec = name.parse().unwrap();
            assert_eq!(spec.to_string(), name);
        }
    }

    #[test]
    fn channel_scaling() {
        let n = GraphSpec::new(Variant::N);
        assert_eq!(n.channels(64), 16);
        assert_eq!(n.channels(1024), 256);
        assert_eq!(n.repeats(3), 1);
        assert_eq!(n.repeats(6), 2);
        let s = GraphSpec::new(Variant::S);
        assert_eq!(s.channels(1024), 512);
    }

    #[test]
    fn validation() {
        let mut s = GraphSpec::new(Variant::N);
        s.num_classes = 80;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = GraphSpec::new(Variant::N);
        s.reg_max = 0;
        assert!(s.validate().is_err());
        let mut s = GraphSpec::new(Variant::N);
        s.width_multiple = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s: GraphSpec = serde_json::from_str(
            r#"{"variant":"n","use_ghost":true,"depth_multiple":0.33,"width_multiple":0.25}"#,
        )
        .unwrap();
        assert_eq!(s.reg_max, 16);
        assert_eq!(s.activation, Activation::SiLU);
        assert!(s.quant_boundaries.is_empty());
    }
}
