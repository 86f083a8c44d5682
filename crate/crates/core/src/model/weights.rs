use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{ConvLayer, ModelGraph};
use crate::error::{Error, Result};
use crate::quant::{QTensor, QuantParams};
use crate::tensor::BatchNormParams;

pub const BN_EPSILON: f32 = 1e-3;

/// Half-width of the seeded uniform weight initialisation.
const INIT_RANGE: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct FloatLayer {
    pub kernel: Vec<f32>,
    pub kernel_shape: [usize; 4],
    pub bias: Option<Vec<f32>>,
    pub batch_norm: Option<BatchNormParams>,
}

/// An integer conv: int8 kernel, int32 bias at scale `2^−(f_in + f_w)`, and the
/// fraction bits its input is quantized to and its output requantized to.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub weight: QTensor,
    pub bias: Vec<i32>,
    pub input: QuantParams,
    pub output: QuantParams,
}

impl QuantLayer {
    pub fn kernel_shape(&self) -> [usize; 4] {
        let s = self.weight.shape();
        [s.batch, s.channels, s.height, s.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    Float(FloatLayer),
    Quantized(QuantLayer),
}

impl LayerWeights {
    pub fn kernel_shape(&self) -> [usize; 4] {
        match self {
            LayerWeights::Float(f) => f.kernel_shape,
            LayerWeights::Quantized(q) => q.kernel_shape(),
        }
    }
}

/// Named weight blobs, one entry per convolution layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    layers: BTreeMap<String, LayerWeights>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, w: LayerWeights) -> Option<LayerWeights> {
        self.layers.insert(name.into(), w)
    }

    pub fn get(&self, name: &str) -> Option<&LayerWeights> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerWeights> {
        self.layers.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<LayerWeights> {
        self.layers.remove(name)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layers in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerWeights)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_quantized(&self) -> bool {
        self.layers
            .values()
            .any(|l| matches!(l, LayerWeights::Quantized(_)))
    }

    /// Deterministic uniform(−0.1, 0.1) weights with identity batch norm. Each layer
    /// draws from its own stream keyed by `seed` and its name, so a layer's weights
    /// do not depend on which other layers exist.
    pub fn seeded(g: &ModelGraph, seed: u64) -> Self {
        let mut store = Self::new();
        for (_, layer) in g.conv_layers() {
            let key = seed ^ ((crc32fast::hash(layer.name.as_bytes()) as u64) << 32);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let shape = layer.kernel_shape();
            let n: usize = shape.iter().product();
            let kernel = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
            let bias = (!layer.batch_norm)
                .then(|| (0..layer.c_out).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect());
            store.insert(layer.name.clone(), LayerWeights::Float(float_layer(layer, kernel, bias)));
        }
        store
    }

    /// All-zero kernels and biases with identity batch norm.
    pub fn zeros(g: &ModelGraph) -> Self {
        let mut store = Self::new();
        for (_, layer) in g.conv_layers() {
            let n: usize = layer.kernel_shape().iter().product();
            let bias = (!layer.batch_norm).then(|| vec![0.0; layer.c_out]);
            store.insert(
                layer.name.clone(),
                LayerWeights::Float(float_layer(layer, vec![0.0; n], bias)),
            );
        }
        store
    }

    /// Check that every conv in `g` has exactly one entry of the right shape and that
    /// no entry is orphaned.
    pub fn validate(&self, g: &ModelGraph) -> Result<()> {
        for (_, layer) in g.conv_layers() {
            let w = self
                .get(&layer.name)
                .ok_or_else(|| Error::MissingWeights(layer.name.clone()))?;
            check_layer(layer, w)?;
        }
        if self.len() != g.conv_layers().count() {
            let orphan = self
                .layers
                .keys()
                .find(|k| g.conv_layer(k).is_none())
                .cloned()
                .unwrap_or_default();
            return Err(Error::LayerMismatch {
                layer: orphan,
                reason: "not a layer of the configured model".into(),
            });
        }
        Ok(())
    }
}

fn float_layer(layer: &ConvLayer, kernel: Vec<f32>, bias: Option<Vec<f32>>) -> FloatLayer {
    FloatLayer {
        kernel,
        kernel_shape: layer.kernel_shape(),
        bias,
        batch_norm: layer
            .batch_norm
            .then(|| BatchNormParams::identity(layer.c_out, BN_EPSILON)),
    }
}

fn check_layer(layer: &ConvLayer, w: &LayerWeights) -> Result<()> {
    let mismatch = |reason: String| Error::LayerMismatch {
        layer: layer.name.clone(),
        reason,
    };
    let expected = layer.kernel_shape();
    let found = w.kernel_shape();
    if expected != found {
        return Err(mismatch(format!(
            "kernel shape {found:?}, expected {expected:?}"
        )));
    }
    match w {
        LayerWeights::Float(f) => {
            if f.kernel.len() != expected.iter().product::<usize>() {
                return Err(mismatch(format!("kernel has {} values", f.kernel.len())));
            }
            if let Some(b) = &f.bias {
                if b.len() != layer.c_out {
                    return Err(mismatch(format!("bias has {} values", b.len())));
                }
            }
            if let Some(bn) = &f.batch_norm {
                let lens = [
                    bn.gamma.len(),
                    bn.beta.len(),
                    bn.running_mean.len(),
                    bn.running_var.len(),
                ];
                if lens.iter().any(|&l| l != layer.c_out) {
                    return Err(mismatch(format!("batch norm lengths {lens:?}")));
                }
            }
        }
        LayerWeights::Quantized(q) => {
            if q.bias.len() != layer.c_out {
                return Err(mismatch(format!("bias has {} values", q.bias.len())));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn seeded_is_deterministic_and_in_range() {
        let g = build_model(&"yolov8n-ghost".parse().unwrap()).unwrap();
        let a = WeightStore::seeded(&g, 7);
        assert_eq!(a, WeightStore::seeded(&g, 7));
        assert_ne!(a, WeightStore::seeded(&g, 8));
        for (_, w) in a.iter() {
            let LayerWeights::Float(f) = w else { panic!() };
            assert!(f.kernel.iter().all(|v| v.abs() <= INIT_RANGE));
        }
        a.validate(&g).unwrap();
    }

    #[test]
    fn backbone_weights_shared_across_p2() {
        let a = build_model(&"yolov8n-ghost".parse().unwrap()).unwrap();
        let b = build_model(&"yolov8n-ghost-p2".parse().unwrap()).unwrap();
        let wa = WeightStore::seeded(&a, 3);
        let wb = WeightStore::seeded(&b, 3);
        let mut n = 0;
        for (name, w) in wa.iter().filter(|(n, _)| n.starts_with("backbone.")) {
            assert_eq!(Some(w), wb.get(name), "{name}");
            n += 1;
        }
        assert!(n > 10);
    }

    #[test]
    fn validation_names_the_layer() {
        let g = build_model(&"yolov8n".parse().unwrap()).unwrap();
        let mut w = WeightStore::seeded(&g, 1);
        w.remove("neck.td3.cv1");
        match w.validate(&g) {
            Err(Error::MissingWeights(name)) => assert_eq!(name, "neck.td3.cv1"),
            other => panic!("{other:?}"),
        }

        let mut w = WeightStore::seeded(&g, 1);
        if let Some(LayerWeights::Float(f)) = w.get_mut("backbone.0") {
            f.kernel_shape = [16, 3, 5, 5];
        }
        assert!(matches!(
            w.validate(&g),
            Err(Error::LayerMismatch { layer, .. }) if layer == "backbone.0"
        ));

        let mut w = WeightStore::seeded(&g, 1);
        let extra = w.get("backbone.0").unwrap().clone();
        w.insert("backbone.extra", extra);
        assert!(matches!(
            w.validate(&g),
            Err(Error::LayerMismatch { layer, .. }) if layer == "backbone.extra"
        ));
    }
}
