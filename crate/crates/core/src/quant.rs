//! Symmetric power-of-two INT8 quantization.
//!
//! A tensor quantized with `f` fraction bits stores `q = clamp(round(v·2^f), −128, 127)`
//! and represents `q·2^−f`. Rounding is half-away-from-zero everywhere so the integer
//! paths can be checked bit-exactly. Scales are per tensor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{output_extent, valid_taps, Shape, Tensor};

pub const MAX_FRACTION_BITS: u8 = 15;
pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Relative slack under which two calibration errors count as tied.
const CALIBRATION_TIE_RTOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QuantParams {
    fraction_bits: u8,
}

impl QuantParams {
    pub fn new(fraction_bits: u8) -> Result<Self> {
        if fraction_bits > MAX_FRACTION_BITS {
            return Err(Error::Config(format!(
                "fraction bits {fraction_bits} outside [0, {MAX_FRACTION_BITS}]"
            )));
        }
        Ok(Self { fraction_bits })
    }

    pub fn fraction_bits(self) -> u8 {
        self.fraction_bits
    }

    /// `2^−f`, exact in both f32 and f64.
    pub fn scale(self) -> f64 {
        (-(self.fraction_bits as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        QMIN as f64 * self.scale()
    }

    pub fn max_value(self) -> f64 {
        QMAX as f64 * self.scale()
    }

    /// Quantize one value; the flag reports saturation. NaN maps to 0.
    #[inline]
    pub fn quantize_value(self, v: f32) -> (i8, bool) {
        if v.is_nan() {
            return (0, false);
        }
        let r = (v as f64 * (self.fraction_bits as f64).exp2()).round();
        if r > QMAX as f64 {
            (QMAX as i8, true)
        } else if r < QMIN as f64 {
            (QMIN as i8, true)
        } else {
            (r as i8, false)
        }
    }

    #[inline]
    pub fn dequantize_value(self, q: i8) -> f32 {
        (q as f64 * self.scale()) as f32
    }
}

impl TryFrom<u8> for QuantParams {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        QuantParams::new(value)
    }
}

impl From<QuantParams> for u8 {
    fn from(qp: QuantParams) -> u8 {
        qp.fraction_bits
    }
}

#[derive(Clone, Debug)]
pub struct QTensor {
    shape: Shape,
    data: Vec<i8>,
    qp: QuantParams,
    saturated: usize,
}

impl QTensor {
    pub fn new(shape: Shape, data: Vec<i8>, qp: QuantParams) -> Result<Self> {
        if data.len() != shape.numel() || shape.numel() == 0 {
            return Err(Error::Dimension {
                axis: "data",
                expected: shape.numel(),
                found: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            qp,
            saturated: 0,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn qp(&self) -> QuantParams {
        self.qp
    }

    /// Number of elements clamped to the int8 range when this tensor was produced.
    pub fn saturated(&self) -> usize {
        self.saturated
    }

    fn plane(&self, b: usize, c: usize) -> &[i8] {
        let n = self.shape.plane();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }
}

/// Equality of the represented values; the saturation count is bookkeeping from
/// when the tensor was produced and is not compared.
impl PartialEq for QTensor {
    fn eq(&self, o: &Self) -> bool {
        self.shape == o.shape && self.qp == o.qp && self.data == o.data
    }
}

pub fn quantize(x: &Tensor, qp: QuantParams) -> QTensor {
    let mut saturated = 0;
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let (q, sat) = qp.quantize_value(v);
            saturated += sat as usize;
            q
        })
        .collect();
    QTensor {
        shape: x.shape(),
        data,
        qp,
        saturated,
    }
}

pub fn dequantize(q: &QTensor) -> Tensor {
    let data = q.data.iter().map(|&v| q.qp.dequantize_value(v)).collect();
    Tensor::new(q.shape, data).expect("QTensor shape is valid")
}

/// Forward half of QAT fake quantization: `dequantize(quantize(x))`.
pub fn fake_quantize(x: &Tensor, qp: QuantParams) -> Tensor {
    dequantize(&quantize(x, qp))
}

/// Straight-through derivative of [`fake_quantize`]: 1 inside the representable range,
/// 0 outside it (and for NaN).
pub fn fake_quantize_derivative(v: f32, qp: QuantParams) -> f32 {
    let v = v as f64;
    if v >= qp.min_value() && v <= qp.max_value() {
        1.0
    } else {
        0.0
    }
}

/// Backward pass of fake quantization: upstream gradient masked by the STE.
pub fn fake_quantize_backward(x: &Tensor, upstream: &Tensor, qp: QuantParams) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::Dimension {
            axis: "data",
            expected: x.shape().numel(),
            found: upstream.shape().numel(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| g * fake_quantize_derivative(v, qp))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Streaming squared-error accumulator over all 16 candidate fraction-bit settings.
///
/// Each observed slice is reduced locally first and then folded into the running
/// totals, so the result only depends on the order slices are observed in. NaNs are
/// excluded from the statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Calibrator {
    sse: [f64; MAX_FRACTION_BITS as usize + 1],
    count: u64,
}

impl Calibrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, values: &[f32]) {
        let mut local = [0f64; MAX_FRACTION_BITS as usize + 1];
        let mut count = 0u64;
        for &v in values {
            if v.is_nan() {
                continue;
            }
            count += 1;
            let v = v as f64;
            for (f, acc) in local.iter_mut().enumerate() {
                let up = (f as f64).exp2();
                let q = (v * up).round().clamp(QMIN as f64, QMAX as f64);
                let e = v - q / up;
                *acc += e * e;
            }
        }
        self.merge_raw(&local, count);
    }

    pub fn observe_tensor(&mut self, x: &Tensor) {
        self.observe(x.data());
    }

    pub fn merge(&mut self, other: &Calibrator) {
        self.merge_raw(&other.sse, other.count);
    }

    fn merge_raw(&mut self, sse: &[f64], count: u64) {
        for (a, b) in self.sse.iter_mut().zip(sse) {
            *a += b;
        }
        self.count += count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean squared round-trip error per fraction-bit candidate.
    pub fn mse(&self) -> [f64; MAX_FRACTION_BITS as usize + 1] {
        let mut out = [0f64; MAX_FRACTION_BITS as usize + 1];
        if self.count > 0 {
            for (o, s) in out.iter_mut().zip(&self.sse) {
                *o = s / self.count as f64;
            }
        }
        out
    }

    /// Candidate with the smallest mean squared error; near-ties go to the larger `f`.
    pub fn best(&self) -> QuantParams {
        let mse = self.mse();
        let mut best = MAX_FRACTION_BITS as usize;
        for f in (0..MAX_FRACTION_BITS as usize).rev() {
            if mse[f] < mse[best] * (1.0 - CALIBRATION_TIE_RTOL) {
                best = f;
            }
        }
        QuantParams {
            fraction_bits: best as u8,
        }
    }
}

/// Fraction bits minimizing the mean squared quantize/dequantize error over every
/// sample value.
pub fn calibrate_fraction_bits(samples: &[Tensor]) -> Result<QuantParams> {
    if samples.is_empty() {
        return Err(Error::Usage("calibration needs at least one sample".into()));
    }
    let mut cal = Calibrator::new();
    for s in samples {
        cal.observe_tensor(s);
    }
    Ok(cal.best())
}

/// Integer convolution parameters. `weight` has shape `(c_out, c_in / groups, kh, kw)`
/// packed into [`Shape`] as `(batch, channels, height, width)`; `bias` is in units of
/// `2^−(f_x + f_w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QConvParams {
    pub weight: QTensor,
    pub bias: Vec<i32>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl QConvParams {
    pub fn c_out(&self) -> usize {
        self.weight.shape.batch
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape.channels * self.groups
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weight.shape;
        if self.stride == 0 || self.groups == 0 || ws.batch % self.groups != 0 {
            return Err(Error::Config(format!(
                "invalid integer conv geometry: stride {}, groups {}, c_out {}",
                self.stride, self.groups, ws.batch
            )));
        }
        if self.bias.len() != ws.batch {
            return Err(Error::Dimension {
                axis: "bias",
                expected: ws.batch,
                found: self.bias.len(),
            });
        }
        // Worst-case |accumulator| must stay inside i32.
        let fan_in = (ws.channels * ws.height * ws.width) as i64;
        let max_bias = self.bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
        if 128 * 128 * fan_in + max_bias > i32::MAX as i64 {
            return Err(Error::Config(format!(
                "fan-in {fan_in} with bias {max_bias} can overflow the int32 accumulator"
            )));
        }
        Ok(())
    }
}

/// Round `acc · 2^−shift` half away from zero.
#[inline]
pub fn shift_round(acc: i64, shift: u32) -> i64 {
    if shift == 0 {
        return acc;
    }
    let half = 1i64 << (shift - 1);
    if acc >= 0 {
        (acc + half) >> shift
    } else {
        -((-acc + half) >> shift)
    }
}

/// int8 × int8 convolution with int32 accumulation, requantized to `out_qp` by an
/// arithmetic shift of `f_x + f_w − f_out` and saturated to int8.
pub fn qconv2d(x: &QTensor, p: &QConvParams, out_qp: QuantParams) -> Result<QTensor> {
    p.validate()?;
    let s = x.shape;
    if s.channels != p.c_in() {
        return Err(Error::Dimension {
            axis: "channels",
            expected: p.c_in(),
            found: s.channels,
        });
    }
    let acc_bits = x.qp.fraction_bits as i32 + p.weight.qp.fraction_bits as i32;
    let shift = acc_bits - out_qp.fraction_bits as i32;
    if shift < 0 {
        return Err(Error::Config(format!(
            "output fraction bits {} exceed input + weight fraction bits {acc_bits}",
            out_qp.fraction_bits
        )));
    }
    let shift = shift as u32;
    let ws = p.weight.shape;
    let (c_out, cig, kh, kw) = (ws.batch, ws.channels, ws.height, ws.width);
    let ho = output_extent("height", s.height, kh, p.stride, p.padding)?;
    let wo = output_extent("width", s.width, kw, p.stride, p.padding)?;
    let out_shape = Shape::new(s.batch, c_out, ho, wo);
    let cog = c_out / p.groups;
    let plane_out = ho * wo;

    let mut data = vec![0i8; out_shape.numel()];
    let saturated: usize = data
        .par_chunks_mut(plane_out)
        .enumerate()
        .map(|(idx, dst)| {
            let b = idx / c_out;
            let oc = idx % c_out;
            let g = oc / cog;
            let mut acc = vec![p.bias[oc]; plane_out];
            for icg in 0..cig {
                let src = x.plane(b, g * cig + icg);
                for ky in 0..kh {
                    let rows = valid_taps(s.height, ho, ky, p.stride, p.padding);
                    for kx in 0..kw {
                        let wv = p.weight.data[((oc * cig + icg) * kh + ky) * kw + kx] as i32;
                        let cols = valid_taps(s.width, wo, kx, p.stride, p.padding);
                        for oy in rows.clone() {
                            let iy = oy * p.stride + ky - p.padding;
                            let row = &src[iy * s.width..(iy + 1) * s.width];
                            let acc_row = &mut acc[oy * wo..(oy + 1) * wo];
                            for ox in cols.clone() {
                                acc_row[ox] += wv * row[ox * p.stride + kx - p.padding] as i32;
                            }
                        }
                    }
                }
            }
            let mut sat = 0;
            for (d, a) in dst.iter_mut().zip(&acc) {
                let r = shift_round(*a as i64, shift);
                let c = r.clamp(QMIN as i64, QMAX as i64);
                sat += (c != r) as usize;
                *d = c as i8;
            }
            sat
        })
        .sum();
    Ok(QTensor {
        shape: out_shape,
        data,
        qp: out_qp,
        saturated,
    })
}
