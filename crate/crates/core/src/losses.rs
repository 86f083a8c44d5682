//! Box regression losses and the distribution focal loss.
//!
//! Each differentiable loss is written once over [`Dual`], a forward-mode dual number
//! carrying the derivatives with respect to the four predicted coordinates, so the
//! value and its exact gradient come out of the same evaluation. At kinks (edges
//! coinciding) the derivative of the branch selected by the comparison is used; at
//! `pred == gt` every loss reports a zero gradient, which is a valid subgradient at
//! the minimum.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Default attention parameter of PIoU v2.
pub const PIOU_LAMBDA: f64 = 1.3;
/// Image extent used to normalize MPDIoU corner distances.
pub const MPDIOU_IMAGE: (f64, f64) = (800.0, 800.0);
const CIOU_EPS: f64 = 1e-7;

/// A non-degenerate box: finite, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Domain(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_coords(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            x1: self.x1 * k,
            y1: self.y1 * k,
            x2: self.x2 * k,
            y2: self.y2 * k,
        }
    }
}

/// Value plus partial derivatives with respect to the predicted `x1, y1, x2, y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }

    pub fn atan(self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    pub fn abs(self) -> Self {
        if self.v < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn sq(self) -> Self {
        self * self
    }

    pub fn min(self, o: Self) -> Self {
        if o.v < self.v {
            o
        } else {
            self
        }
    }

    pub fn max(self, o: Self) -> Self {
        if o.v > self.v {
            o
        } else {
            self
        }
    }

    /// Drop the derivative, keeping the value.
    pub fn detach(self) -> Self {
        Self::constant(self.v)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        self + (-o)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; 4];
        for (k, x) in d.iter_mut().enumerate() {
            *x = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let mut d = [0.0; 4];
        for (k, x) in d.iter_mut().enumerate() {
            *x = (self.d[k] * o.v - self.v * o.d[k]) / (o.v * o.v);
        }
        Dual { v: self.v / o.v, d }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        self + Dual::constant(o)
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(self, o: f64) -> Dual {
        self + Dual::constant(-o)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual {
            v: self.v * o,
            d: self.d.map(|x| x * o),
        }
    }
}

impl Sub<Dual> for f64 {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::constant(self) - o
    }
}

#[derive(Clone, Copy)]
struct DBox {
    x1: Dual,
    y1: Dual,
    x2: Dual,
    y2: Dual,
}

impl DBox {
    fn pred(b: &BBox) -> Self {
        Self {
            x1: Dual::variable(b.x1, 0),
            y1: Dual::variable(b.y1, 1),
            x2: Dual::variable(b.x2, 2),
            y2: Dual::variable(b.y2, 3),
        }
    }

    fn fixed(b: &BBox) -> Self {
        Self {
            x1: Dual::constant(b.x1),
            y1: Dual::constant(b.y1),
            x2: Dual::constant(b.x2),
            y2: Dual::constant(b.y2),
        }
    }

    fn w(&self) -> Dual {
        self.x2 - self.x1
    }

    fn h(&self) -> Dual {
        self.y2 - self.y1
    }

    fn cx(&self) -> Dual {
        (self.x1 + self.x2) * 0.5
    }

    fn cy(&self) -> Dual {
        (self.y1 + self.y2) * 0.5
    }
}

fn d_iou(p: &DBox, g: &DBox) -> Dual {
    let zero = Dual::constant(0.0);
    let iw = (p.x2.min(g.x2) - p.x1.max(g.x1)).max(zero);
    let ih = (p.y2.min(g.y2) - p.y1.max(g.y1)).max(zero);
    let inter = iw * ih;
    let union = p.w() * p.h() + g.w() * g.h() - inter;
    inter / union
}

/// Squared centre distance and squared diagonal of the smallest enclosing box.
fn centre_and_enclosure(p: &DBox, g: &DBox) -> (Dual, Dual, Dual) {
    let rho2 = (p.cx() - g.cx()).sq() + (p.cy() - g.cy()).sq();
    let ew = p.x2.max(g.x2) - p.x1.min(g.x1);
    let eh = p.y2.max(g.y2) - p.y1.min(g.y1);
    (rho2, ew, eh)
}

fn validated(pred: &BBox, gt: &BBox) -> Result<(DBox, DBox)> {
    pred.validate()?;
    gt.validate()?;
    Ok((DBox::pred(pred), DBox::fixed(gt)))
}

fn finish(pred: &BBox, gt: &BBox, loss: Dual) -> (f64, [f64; 4]) {
    if pred == gt {
        (loss.v, [0.0; 4])
    } else {
        (loss.v, loss.d)
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(d_iou(&DBox::fixed(a), &DBox::fixed(b)).v)
}

/// `1 − IoU + ρ²/c² + αv` with `v = 4/π²·(atan(w_gt/h_gt) − atan(w/h))²` and
/// `α = v / (1 − IoU + v + ε)`; the gradient includes α's dependence on the box.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    let (p, g) = validated(pred, gt)?;
    let iou = d_iou(&p, &g);
    let (rho2, ew, eh) = centre_and_enclosure(&p, &g);
    let c2 = ew.sq() + eh.sq();
    let v = ((g.w() / g.h()).atan() - (p.w() / p.h()).atan()).sq() * (4.0 / (PI * PI));
    let alpha = v / ((1.0 - iou) + v + CIOU_EPS);
    let loss = (1.0 - iou) + rho2 / c2 + alpha * v;
    Ok(finish(pred, gt, loss))
}

/// Mean absolute edge offset, each normalized by the matching ground-truth extent.
pub fn piou_penalty(pred: &BBox, gt: &BBox) -> Result<f64> {
    let (p, g) = validated(pred, gt)?;
    Ok(d_penalty(&p, &g).v)
}

fn d_penalty(p: &DBox, g: &DBox) -> Dual {
    let (w, h) = (g.w(), g.h());
    ((p.x1 - g.x1).abs() / w + (p.x2 - g.x2).abs() / w + (p.y1 - g.y1).abs() / h + (p.y2 - g.y2).abs() / h) * 0.25
}

/// PIoU v2: `L = u(λq) · L_PIoU` where `L_PIoU = 2 − IoU − e^{−P²}`, `q = e^{−P}`
/// and `u(x) = 3x·e^{−x²}`.
pub fn piou2_loss(pred: &BBox, gt: &BBox, lambda: f64) -> Result<(f64, [f64; 4])> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let (p, g) = validated(pred, gt)?;
    let pen = d_penalty(&p, &g);
    let base = 2.0 - d_iou(&p, &g) - (-pen.sq()).exp();
    let x = (-pen).exp() * lambda;
    let attention = x * (-x.sq()).exp() * 3.0;
    Ok(finish(pred, gt, attention * base))
}

/// WIoU v1: `exp(ρ² / (W_g² + H_g²)) · (1 − IoU)`, with the enclosing-box term
/// treated as a constant.
pub fn wiou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    let (p, g) = validated(pred, gt)?;
    let (rho2, ew, eh) = centre_and_enclosure(&p, &g);
    let r = (rho2 / (ew.sq() + eh.sq()).detach()).exp();
    Ok((r * (1.0 - d_iou(&p, &g))).v)
}

/// `1 − IoU + (d₁² + d₂²) / (w² + h²)`, where `d₁`, `d₂` are the top-left and
/// bottom-right corner distances and `w × h` is the input image.
pub fn mpdiou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    mpdiou_loss_in(pred, gt, MPDIOU_IMAGE)
}

pub fn mpdiou_loss_in(pred: &BBox, gt: &BBox, image: (f64, f64)) -> Result<f64> {
    let (p, g) = validated(pred, gt)?;
    let norm = image.0 * image.0 + image.1 * image.1;
    let d1 = (p.x1 - g.x1).sq() + (p.y1 - g.y1).sq();
    let d2 = (p.x2 - g.x2).sq() + (p.y2 - g.y2).sq();
    Ok(((1.0 - d_iou(&p, &g)) + (d1 + d2) * (1.0 / norm)).v)
}

/// Cross-entropy of the bin distribution against the two bins bracketing `target`,
/// weighted by linear interpolation. Returns the loss and its gradient with respect
/// to the logits.
pub fn dfl_loss(logits: &[f64], target: f64) -> Result<(f64, Vec<f64>)> {
    let n = logits.len();
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 bins, got {n}")));
    }
    if !(target >= 0.0 && target <= (n - 1) as f64) {
        return Err(Error::Domain(format!("target {target} outside [0, {}]", n - 1)));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite logit".into()));
    }
    let left = (target.floor() as usize).min(n - 2);
    let right = left + 1;
    let wr = target - left as f64;
    let wl = 1.0 - wr;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let log_p = |k: usize| logits[k] - m - z.ln();
    let loss = -(wl * log_p(left) + wr * log_p(right));
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - m).exp() / z).collect();
    grad[left] -= wl;
    grad[right] -= wr;
    Ok((loss, grad))
}
