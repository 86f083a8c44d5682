//! Independent reference implementations used by the integration and acceptance
//! tests. Everything here is written from the definitions, in f64 or i128, with no
//! calls into the kernels under test.

#![allow(dead_code)]

use darkship_core::pipeline::{BoxXyxy, Detection, Grid};
use darkship_core::quant::{QConvParams, QTensor};
use darkship_core::tensor::{BatchNormParams, ConvParams, Tensor};

/// Dense result of an oracle in `(b, c, h, w)` order.
#[derive(Clone, Debug)]
pub struct Dense {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Dense {
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((b * cs + c) * hs + y) * ws + x]
    }
}

/// Norm-wise relative error `max|a − b| / max(max|b|, 1e-30)`.
pub fn rel_err(actual: &Tensor, expected: &Dense) -> f64 {
    let s = actual.shape();
    assert_eq!([s.batch, s.channels, s.height, s.width], expected.shape, "oracle shape");
    let diff = actual
        .data()
        .iter()
        .zip(&expected.data)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    let scale = expected.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-30)
}

pub fn conv_direct(x: &Tensor, p: &ConvParams) -> Dense {
    let s = x.shape();
    let [c_out, cig, kh, kw] = p.kernel_shape;
    let ho = (s.height + 2 * p.padding - kh) / p.stride + 1;
    let wo = (s.width + 2 * p.padding - kw) / p.stride + 1;
    let cog = c_out / p.groups;
    let mut data = Vec::with_capacity(s.batch * c_out * ho * wo);
    for b in 0..s.batch {
        for oc in 0..c_out {
            let g = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = p.bias[oc] as f64;
                    for icg in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                    continue;
                                }
                                let w = p.kernel[((oc * cig + icg) * kh + ky) * kw + kx] as f64;
                                acc += w * x.get(b, g * cig + icg, iy as usize, ix as usize) as f64;
                            }
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    Dense {
        shape: [s.batch, c_out, ho, wo],
        data,
    }
}

/// Convolution followed by an explicit inference-mode batch norm.
pub fn conv_then_bn(x: &Tensor, p: &ConvParams, bn: &BatchNormParams) -> Dense {
    let mut d = conv_direct(x, p);
    let [b, c, h, w] = d.shape;
    for bi in 0..b {
        for ci in 0..c {
            let denom = (bn.running_var[ci] as f64 + bn.epsilon as f64).sqrt();
            for i in 0..h * w {
                let v = &mut d.data[(bi * c + ci) * h * w + i];
                *v = (*v - bn.running_mean[ci] as f64) / denom * bn.gamma[ci] as f64 + bn.beta[ci] as f64;
            }
        }
    }
    d
}

pub fn maxpool_direct(x: &Tensor, k: usize, stride: usize, pad: usize) -> Dense {
    let s = x.shape();
    let ho = (s.height + 2 * pad - k) / stride + 1;
    let wo = (s.width + 2 * pad - k) / stride + 1;
    let mut data = Vec::new();
    for b in 0..s.batch {
        for c in 0..s.channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < s.height as isize && ix < s.width as isize {
                                m = m.max(x.get(b, c, iy as usize, ix as usize) as f64);
                            }
                        }
                    }
                    data.push(m);
                }
            }
        }
    }
    Dense {
        shape: [s.batch, s.channels, ho, wo],
        data,
    }
}

pub fn upsample_index(x: &Tensor) -> Dense {
    let s = x.shape();
    let mut data = Vec::new();
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..2 * s.height {
                for xx in 0..2 * s.width {
                    data.push(x.get(b, c, y / 2, xx / 2) as f64);
                }
            }
        }
    }
    Dense {
        shape: [s.batch, s.channels, 2 * s.height, 2 * s.width],
        data,
    }
}

pub fn concat_index(xs: &[&Tensor]) -> Dense {
    let s = xs[0].shape();
    let total: usize = xs.iter().map(|t| t.shape().channels).sum();
    let mut data = Vec::new();
    for b in 0..s.batch {
        for c in 0..total {
            let (mut t, mut local) = (0, c);
            while local >= xs[t].shape().channels {
                local -= xs[t].shape().channels;
                t += 1;
            }
            for y in 0..s.height {
                for x in 0..s.width {
                    data.push(xs[t].get(b, local, y, x) as f64);
                }
            }
        }
    }
    Dense {
        shape: [s.batch, total, s.height, s.width],
        data,
    }
}

/// Half-away-from-zero rounding of `acc / 2^shift` using exact rational arithmetic.
pub fn round_shift_i128(acc: i128, shift: u32) -> i128 {
    let d = 1i128 << shift;
    let (q, r) = (acc.abs() / d, acc.abs() % d);
    let mag = if 2 * r >= d { q + 1 } else { q };
    if acc < 0 {
        -mag
    } else {
        mag
    }
}

/// Integer convolution in i128 with half-away requantization and int8 clamp.
pub fn qconv_direct(x: &QTensor, p: &QConvParams, f_out: u8) -> (Vec<i8>, [usize; 4]) {
    let s = x.shape();
    let ws = p.weight.shape();
    let (c_out, cig, kh, kw) = (ws.batch, ws.channels, ws.height, ws.width);
    let ho = (s.height + 2 * p.padding - kh) / p.stride + 1;
    let wo = (s.width + 2 * p.padding - kw) / p.stride + 1;
    let shift = (x.qp().fraction_bits() + p.weight.qp().fraction_bits() - f_out) as u32;
    let cog = c_out / p.groups;
    let xi = |b: usize, c: usize, y: usize, xx: usize| {
        x.data()[((b * s.channels + c) * s.height + y) * s.width + xx] as i128
    };
    let mut out = Vec::new();
    for b in 0..s.batch {
        for oc in 0..c_out {
            let g = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = p.bias[oc] as i128;
                    for icg in 0..cig {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.height as isize || ix >= s.width as isize {
                                    continue;
                                }
                                let w = p.weight.data()[((oc * cig + icg) * kh + ky) * kw + kx] as i128;
                                acc += w * xi(b, g * cig + icg, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(round_shift_i128(acc, shift).clamp(-128, 127) as i8);
                }
            }
        }
    }
    (out, [s.batch, c_out, ho, wo])
}

/// Mean squared round-trip error for every fraction-bit candidate, computed with
/// its own half-away rounding.
pub fn fsweep_mse(values: &[f32]) -> [f64; 16] {
    let mut out = [0.0; 16];
    for (f, o) in out.iter_mut().enumerate() {
        let up = (1u64 << f) as f64;
        let mut sse = 0.0;
        for &v in values {
            let t = v as f64 * up;
            let r = t.trunc() + if t.fract().abs() >= 0.5 { t.signum() } else { 0.0 };
            let q = r.clamp(-128.0, 127.0);
            sse += (v as f64 - q / up).powi(2);
        }
        *o = sse / values.len() as f64;
    }
    out
}

/// Candidates the sweep accepts: within `rtol` of the minimum error. The largest
/// member is the one the tie rule prefers.
pub fn fsweep_acceptable(values: &[f32], rtol: f64) -> Vec<u8> {
    let mse = fsweep_mse(values);
    let min = mse.iter().cloned().fold(f64::INFINITY, f64::min);
    (0..16u8).filter(|&f| mse[f as usize] <= min * (1.0 + rtol)).collect()
}

pub fn iou_direct(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Quadratic greedy NMS: sort by score desc then (row, col), then scan every kept box.
pub fn nms_bruteforce(mut dets: Vec<Detection>, thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.row.total_cmp(&b.row))
            .then(a.col.total_cmp(&b.col))
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
            .then(a.bbox.x2.total_cmp(&b.bbox.x2))
            .then(a.bbox.y2.total_cmp(&b.bbox.y2))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou_direct(&k.bbox, &d.bbox) < thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Distance in km from every bathymetry cell to the nearest land cell by scanning
/// all land cells.
pub fn shore_bruteforce(g: &Grid) -> Vec<f64> {
    let land: Vec<(usize, usize)> = (0..g.height())
        .flat_map(|r| (0..g.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| g.get(r, c) >= 0.0)
        .collect();
    let mut out = Vec::with_capacity(g.width() * g.height());
    for r in 0..g.height() {
        for c in 0..g.width() {
            let d = land
                .iter()
                .map(|&(lr, lc)| (r as f64 - lr as f64).hypot(c as f64 - lc as f64))
                .fold(f64::INFINITY, f64::min);
            out.push(d * 0.5);
        }
    }
    out
}

/// Maximum-cardinality, then minimum-total-distance one-to-one assignment by
/// exhaustive search. Returns `(matches, total distance)`.
pub fn assignment_bruteforce(dist: &[Vec<Option<f64>>]) -> (usize, f64) {
    fn go(i: usize, dist: &[Vec<Option<f64>>], used: &mut Vec<bool>, best: &mut (usize, f64), cur: (usize, f64)) {
        if i == dist.len() {
            if cur.0 > best.0 || (cur.0 == best.0 && cur.1 < best.1 - 1e-12) {
                *best = cur;
            }
            return;
        }
        go(i + 1, dist, used, best, cur);
        for j in 0..used.len() {
            if let Some(d) = dist[i][j] {
                if !used[j] {
                    used[j] = true;
                    go(i + 1, dist, used, best, (cur.0 + 1, cur.1 + d));
                    used[j] = false;
                }
            }
        }
    }
    let cols = dist.first().map_or(0, |r| r.len());
    let mut best = (0, 0.0);
    go(0, dist, &mut vec![false; cols], &mut best, (0, 0.0));
    best
}

/// Cell-averaging CFAR on linear VV intensity: a 3×3 mean must exceed the median of
/// the surrounding `block`×`block` window by `margin_db`. Returns connected
/// detections as (row, col) centroids.
pub fn cfar_detect(vv: &Grid, block: usize, margin_db: f64) -> Vec<(f64, f64)> {
    let (w, h) = (vv.width(), vv.height());
    let lin: Vec<f64> = vv.data().iter().map(|&db| 10f64.powf(db as f64 / 10.0)).collect();
    let mut smooth = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (y, x) = (r as isize + dr, c as isize + dc);
                    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                        s += lin[y as usize * w + x as usize];
                        n += 1.0;
                    }
                }
            }
            smooth[r * w + c] = s / n;
        }
    }
    let factor = 10f64.powf(margin_db / 10.0);
    let mut hit = vec![false; w * h];
    for br in (0..h).step_by(block) {
        for bc in (0..w).step_by(block) {
            let mut vals: Vec<f64> = (br..(br + block).min(h))
                .flat_map(|r| (bc..(bc + block).min(w)).map(move |c| (r, c)))
                .map(|(r, c)| lin[r * w + c])
                .collect();
            vals.sort_by(f64::total_cmp);
            let median = vals[vals.len() / 2];
            for r in br..(br + block).min(h) {
                for c in bc..(bc + block).min(w) {
                    hit[r * w + c] = smooth[r * w + c] > median * factor;
                }
            }
        }
    }
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !hit[start] || seen[start] {
            continue;
        }
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            sr += r as f64;
            sc += c as f64;
            n += 1.0;
            for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (y, x) = (r as isize + dr, c as isize + dc);
                if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                    let j = y as usize * w + x as usize;
                    if hit[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push((sr / n, sc / n));
    }
    out
}

/// Fraction of `targets` with a detection within `radius_px`.
pub fn recall(targets: &[(f64, f64)], found: &[(f64, f64)], radius_px: f64) -> f64 {
    if targets.is_empty() {
        return 1.0;
    }
    let hits = targets
        .iter()
        .filter(|t| found.iter().any(|f| (f.0 - t.0).hypot(f.1 - t.1) <= radius_px))
        .count();
    hits as f64 / targets.len() as f64
}
