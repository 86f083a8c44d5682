//! Dense rank-4 feature maps and the float kernels every model block is built from.
//!
//! Layout is row-major `(batch, channels, height, width)`. Convolution reductions
//! accumulate in `f64` and round to `f32` on store, and each output element is summed
//! in the fixed order `(input channel, ky, kx)` regardless of how output planes are
//! scheduled across threads.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        for (axis, v) in [
            ("batch", self.batch),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::Dimension {
                    axis,
                    expected: 1,
                    found: 0,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::Dimension {
                axis: "data",
                expected: shape.numel(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(shape.numel() > 0, "tensor dims must be >= 1");
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        let mut i = 0;
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        t.data[i] = f(b, c, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    /// One `(height, width)` plane.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        if range.start >= range.end || range.end > self.shape.channels {
            return Err(Error::Dimension {
                axis: "channels",
                expected: self.shape.channels,
                found: range.end,
            });
        }
        let s = self.shape;
        let n = s.plane();
        let out_c = range.end - range.start;
        let mut data = Vec::with_capacity(s.batch * out_c * n);
        for b in 0..s.batch {
            let start = (b * s.channels + range.start) * n;
            data.extend_from_slice(&self.data[start..start + out_c * n]);
        }
        Tensor::new(Shape::new(s.batch, out_c, s.height, s.width), data)
    }

    /// Elementwise sum, used by residual shortcuts.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape(self.shape, other.shape)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape, data)
    }

    /// Repeat channels cyclically until `channels` are present.
    pub fn repeat_channels(&self, channels: usize) -> Result<Tensor> {
        if channels == 0 {
            return Err(Error::Dimension {
                axis: "channels",
                expected: 1,
                found: 0,
            });
        }
        let s = self.shape;
        let n = s.plane();
        let mut data = Vec::with_capacity(s.batch * channels * n);
        for b in 0..s.batch {
            for c in 0..channels {
                data.extend_from_slice(self.plane(b, c % s.channels));
            }
        }
        Tensor::new(Shape::new(s.batch, channels, s.height, s.width), data)
    }
}

fn check_same_shape(a: Shape, b: Shape) -> Result<()> {
    for (axis, x, y) in [
        ("batch", a.batch, b.batch),
        ("channels", a.channels, b.channels),
        ("height", a.height, b.height),
        ("width", a.width, b.width),
    ] {
        if x != y {
            return Err(Error::Dimension {
                axis,
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

/// Convolution weights. `kernel` has shape `(c_out, c_in / groups, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Vec<f32>,
    pub kernel_shape: [usize; 4],
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(
        kernel: Vec<f32>,
        kernel_shape: [usize; 4],
        bias: Vec<f32>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let p = Self {
            kernel,
            kernel_shape,
            bias,
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero-initialised parameters with the given geometry.
    pub fn zeros(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 {
            return Err(Error::Config(format!(
                "c_in {c_in} not divisible by groups {groups}"
            )));
        }
        let shape = [c_out, c_in / groups, k, k];
        Self::new(
            vec![0.0; shape.iter().product()],
            shape,
            vec![0.0; c_out],
            stride,
            padding,
            groups,
        )
    }

    pub fn c_out(&self) -> usize {
        self.kernel_shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel_shape[1] * self.groups
    }

    pub fn validate(&self) -> Result<()> {
        let [c_out, cig, kh, kw] = self.kernel_shape;
        if c_out == 0 || cig == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config("kernel dims must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.groups == 0 || c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "c_out {c_out} not divisible by groups {}",
                self.groups
            )));
        }
        if self.kernel.len() != c_out * cig * kh * kw {
            return Err(Error::Dimension {
                axis: "kernel",
                expected: c_out * cig * kh * kw,
                found: self.kernel.len(),
            });
        }
        if self.bias.len() != c_out {
            return Err(Error::Dimension {
                axis: "bias",
                expected: c_out,
                found: self.bias.len(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, oc: usize, icg: usize, ky: usize, kx: usize) -> f32 {
        let [_, cig, kh, kw] = self.kernel_shape;
        self.kernel[((oc * cig + icg) * kh + ky) * kw + kx]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// γ=1, β=0, μ=0, σ²=1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Output spatial size of a sliding window, or a dimension error naming `axis`.
pub fn output_extent(
    axis: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension {
            axis,
            expected: kernel,
            found: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Range of output positions whose input tap `o * stride + k - pad` lands in `[0, n)`.
#[inline]
pub(crate) fn valid_taps(
    n: usize,
    out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k {
        ((n - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Direct cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    let s = x.shape();
    if s.channels != p.c_in() {
        return Err(Error::Dimension {
            axis: "channels",
            expected: p.c_in(),
            found: s.channels,
        });
    }
    let [c_out, cig, kh, kw] = p.kernel_shape;
    let ho = output_extent("height", s.height, kh, p.stride, p.padding)?;
    let wo = output_extent("width", s.width, kw, p.stride, p.padding)?;
    let out_shape = Shape::new(s.batch, c_out, ho, wo);
    let cog = c_out / p.groups;
    let plane_out = ho * wo;

    let mut out = vec![0f32; out_shape.numel()];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, dst)| {
            let b = idx / c_out;
            let oc = idx % c_out;
            let g = oc / cog;
            let mut acc = vec![p.bias[oc] as f64; plane_out];
            for icg in 0..cig {
                let ic = g * cig + icg;
                let src = x.plane(b, ic);
                accumulate_plane(&mut acc, src, s.height, s.width, ho, wo, p, oc, icg);
            }
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        });
    Tensor::new(out_shape, out)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_plane(
    acc: &mut [f64],
    src: &[f32],
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    p: &ConvParams,
    oc: usize,
    icg: usize,
) {
    let [_, _, kh, kw] = p.kernel_shape;
    let (stride, pad) = (p.stride, p.padding);
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let wv = p.weight(oc, icg, 0, 0) as f64;
        for (a, v) in acc.iter_mut().zip(src) {
            *a += wv * *v as f64;
        }
        return;
    }
    for ky in 0..kh {
        let rows = valid_taps(h, ho, ky, stride, pad);
        for kx in 0..kw {
            let wv = p.weight(oc, icg, ky, kx) as f64;
            let cols = valid_taps(w, wo, kx, stride, pad);
            if cols.is_empty() {
                continue;
            }
            for oy in rows.clone() {
                let iy = oy * stride + ky - pad;
                let row = &src[iy * w..(iy + 1) * w];
                let acc_row = &mut acc[oy * wo..(oy + 1) * wo];
                if stride == 1 {
                    let ix0 = cols.start + kx - pad;
                    let n = cols.end - cols.start;
                    for (a, v) in acc_row[cols.clone()].iter_mut().zip(&row[ix0..ix0 + n]) {
                        *a += wv * *v as f64;
                    }
                } else {
                    for ox in cols.clone() {
                        acc_row[ox] += wv * row[ox * stride + kx - pad] as f64;
                    }
                }
            }
        }
    }
}

/// Per-channel convolution; requires `groups == c_in == c_out == x.channels`.
pub fn depthwise_conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let c = x.shape().channels;
    if p.groups != c || p.c_in() != c || p.c_out() != c {
        return Err(Error::Config(format!(
            "depthwise conv needs groups == c_in == c_out == {c}, got groups {} c_in {} c_out {}",
            p.groups,
            p.c_in(),
            p.c_out()
        )));
    }
    conv2d(x, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[serde(rename = "silu")]
    SiLU,
    #[serde(rename = "hardswish")]
    HardSwish,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Identity => v,
            Activation::Sigmoid => sigmoid(v as f64) as f32,
            Activation::SiLU => (v as f64 * sigmoid(v as f64)) as f32,
            Activation::HardSwish => v * (v + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }

    /// Upper bound on |f'(v)| over the reals.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => 0.25,
            // max of σ(v)(1 + v(1 − σ(v))) ≈ 1.0998 near v ≈ 2.40
            Activation::SiLU => 1.1,
            Activation::HardSwish => 1.5,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let mut out = x.clone();
    activate_in_place(&mut out, kind);
    out
}

pub fn activate_in_place(x: &mut Tensor, kind: Activation) {
    if kind == Activation::Identity {
        return;
    }
    x.data_mut()
        .par_chunks_mut(4096)
        .for_each(|chunk| chunk.iter_mut().for_each(|v| *v = kind.apply(*v)));
}

/// Window maximum; padded taps never win.
pub fn maxpool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if k == 0 || stride == 0 {
        return Err(Error::Config("maxpool kernel and stride must be >= 1".into()));
    }
    if pad >= k {
        return Err(Error::Config(format!(
            "maxpool padding {pad} must be smaller than kernel {k}"
        )));
    }
    let s = x.shape();
    let ho = output_extent("height", s.height, k, stride, pad)?;
    let wo = output_extent("width", s.width, k, stride, pad)?;
    let out_shape = Shape::new(s.batch, s.channels, ho, wo);
    let mut out = vec![0f32; out_shape.numel()];
    out.par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = x.plane(idx / s.channels, idx % s.channels);
            for oy in 0..ho {
                let y0 = (oy * stride).saturating_sub(pad);
                let y1 = (oy * stride + k - pad).min(s.height);
                for ox in 0..wo {
                    let x0 = (ox * stride).saturating_sub(pad);
                    let x1 = (ox * stride + k - pad).min(s.width);
                    let mut m = f32::NEG_INFINITY;
                    for yy in y0..y1 {
                        for v in &src[yy * s.width + x0..yy * s.width + x1] {
                            m = m.max(*v);
                        }
                    }
                    dst[oy * wo + ox] = m;
                }
            }
        });
    Tensor::new(out_shape, out)
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h2, w2) = (s.height * 2, s.width * 2);
    let out_shape = Shape::new(s.batch, s.channels, h2, w2);
    let mut out = vec![0f32; out_shape.numel()];
    out.par_chunks_mut(h2 * w2)
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = x.plane(idx / s.channels, idx % s.channels);
            for y in 0..h2 {
                let row = &src[(y / 2) * s.width..(y / 2 + 1) * s.width];
                for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = row[xx / 2];
                }
            }
        });
    Tensor {
        shape: out_shape,
        data: out,
    }
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?
        .shape();
    let mut channels = 0;
    for t in xs {
        let s = t.shape();
        for (axis, a, b) in [
            ("batch", first.batch, s.batch),
            ("height", first.height, s.height),
            ("width", first.width, s.width),
        ] {
            if a != b {
                return Err(Error::Dimension {
                    axis,
                    expected: a,
                    found: b,
                });
            }
        }
        channels += s.channels;
    }
    let n = first.plane();
    let mut data = Vec::with_capacity(first.batch * channels * n);
    for b in 0..first.batch {
        for t in xs {
            let c = t.shape().channels;
            let start = b * c * n;
            data.extend_from_slice(&t.data()[start..start + c * n]);
        }
    }
    Tensor::new(
        Shape::new(first.batch, channels, first.height, first.width),
        data,
    )
}

/// Fold inference batch norm into the preceding convolution:
/// `k' = k·γ/√(σ²+ε)`, `b' = (b−μ)·γ/√(σ²+ε) + β`.
pub fn fold_batchnorm(p: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    let c_out = p.c_out();
    for (name, len) in [
        ("gamma", bn.gamma.len()),
        ("beta", bn.beta.len()),
        ("running_mean", bn.running_mean.len()),
        ("running_var", bn.running_var.len()),
    ] {
        if len != c_out {
            return Err(Error::Config(format!(
                "batch norm {name} has {len} channels, conv has {c_out}"
            )));
        }
    }
    let per_oc = p.kernel.len() / c_out;
    let mut folded = p.clone();
    for oc in 0..c_out {
        let denom = bn.running_var[oc] as f64 + bn.epsilon as f64;
        if denom.is_nan() || denom <= 0.0 {
            return Err(Error::Numeric(format!(
                "channel {oc}: running_var + epsilon = {denom} is not positive"
            )));
        }
        let scale = bn.gamma[oc] as f64 / denom.sqrt();
        for k in &mut folded.kernel[oc * per_oc..(oc + 1) * per_oc] {
            *k = (*k as f64 * scale) as f32;
        }
        folded.bias[oc] =
            ((p.bias[oc] as f64 - bn.running_mean[oc] as f64) * scale + bn.beta[oc] as f64) as f32;
    }
    Ok(folded)
}
