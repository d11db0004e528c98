//! Detection objective: focal classification loss plus CIoU box loss over a
//! bipartite matching between queries and ground truths.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};
use crate::model::{HeadOutputs, Prediction};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use crate::matching::{hungarian_match, MatchResult};

/// Axis-aligned box given by center and extents, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    fn as_f64(&self) -> [f64; 4] {
        [self.cx as f64, self.cy as f64, self.w as f64, self.h as f64]
    }
}

/// A labelled ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the CIoU term.
    pub lambda: f32,
    pub alpha: f32,
    pub gamma: f32,
    pub cost_class: f32,
    pub cost_box: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            alpha: 0.25,
            gamma: 2.0,
            cost_class: 1.0,
            cost_box: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(
                "lambda and gamma must be non-negative".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "focal alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Reads `lambda`, `focal_alpha`, `focal_gamma`, `cost_class`, `cost_box`.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            lambda: kv.take_or("lambda", d.lambda)?,
            alpha: kv.take_or("focal_alpha", d.alpha)?,
            gamma: kv.take_or("focal_gamma", d.gamma)?,
            cost_class: kv.take_or("cost_class", d.cost_class)?,
            cost_box: kv.take_or("cost_box", d.cost_box)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Scalar arithmetic generic over plain floats and forward-mode duals, so the
// CIoU derivative (including the dependence of alpha on the boxes) comes from
// the same code path as its value.
// ---------------------------------------------------------------------------

trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn atan(self) -> Self;

    fn min(self, o: Self) -> Self {
        if self.val() <= o.val() {
            self
        } else {
            o
        }
    }

    fn max(self, o: Self) -> Self {
        if self.val() >= o.val() {
            self
        } else {
            o
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Value plus partial derivatives with respect to the four predicted box fields.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn combine(self, o: Self, da: f64, db: f64, v: f64) -> Self {
        let mut d = [0.0; 4];
        for i in 0..4 {
            d[i] = da * self.d[i] + db * o.d[i];
        }
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.combine(o, 1.0, 1.0, self.v + o.v)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.combine(o, 1.0, -1.0, self.v - o.v)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.combine(o, o.v, self.v, self.v * o.v)
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        self.combine(o, 1.0 / o.v, -q / o.v, q)
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        self.combine(self, -1.0, 0.0, -self.v)
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn atan(self) -> Self {
        let k = 1.0 / (1.0 + self.v * self.v);
        self.combine(self, k, 0.0, self.v.atan())
    }
}

fn iou_generic<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let half = T::cst(0.5);
    let (ax1, ax2) = (a[0] - a[2] * half, a[0] + a[2] * half);
    let (ay1, ay2) = (a[1] - a[3] * half, a[1] + a[3] * half);
    let (bx1, bx2) = (b[0] - b[2] * half, b[0] + b[2] * half);
    let (by1, by2) = (b[1] - b[3] * half, b[1] + b[3] * half);
    let zero = T::cst(0.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(zero);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(zero);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    inter / union
}

fn ciou_generic<T: Real>(p: [T; 4], g: [T; 4]) -> T {
    let half = T::cst(0.5);
    let iou = iou_generic(p, g);
    let dx = p[0] - g[0];
    let dy = p[1] - g[1];
    let d2 = dx * dx + dy * dy;
    let ex1 = (p[0] - p[2] * half).min(g[0] - g[2] * half);
    let ex2 = (p[0] + p[2] * half).max(g[0] + g[2] * half);
    let ey1 = (p[1] - p[3] * half).min(g[1] - g[3] * half);
    let ey2 = (p[1] + p[3] * half).max(g[1] + g[3] * half);
    let cw = ex2 - ex1;
    let ch = ey2 - ey1;
    let c2 = cw * cw + ch * ch;
    let da = (g[2] / g[3]).atan() - (p[2] / p[3]).atan();
    let v = T::cst(4.0 / (PI * PI)) * da * da;
    let penalty = if v.val() == 0.0 {
        T::cst(0.0)
    } else {
        let alpha = v / ((T::cst(1.0) - iou) + v);
        alpha * v
    };
    T::cst(1.0) - (iou - d2 / c2 - penalty)
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    iou_generic(a.as_f64(), b.as_f64()) as f32
}

fn check_pair(pred: &BBox, gt: &BBox) -> Result<()> {
    if !gt.is_valid() {
        return Err(invalid!("degenerate ground-truth box {gt:?}"));
    }
    if !pred.is_valid() {
        return Err(invalid!("degenerate predicted box {pred:?}"));
    }
    Ok(())
}

/// `1 − (IoU − d²/c² − αv)`.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<f32> {
    check_pair(pred, gt)?;
    Ok(ciou_generic(pred.as_f64(), gt.as_f64()) as f32)
}

/// CIoU loss and its gradient with respect to the predicted `(cx, cy, w, h)`.
pub fn ciou_loss_grad(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    check_pair(pred, gt)?;
    let p = pred.as_f64();
    let duals = [
        Dual::var(p[0], 0),
        Dual::var(p[1], 1),
        Dual::var(p[2], 2),
        Dual::var(p[3], 3),
    ];
    let g = gt.as_f64().map(Dual::cst);
    let out = ciou_generic(duals, g);
    Ok((out.v, out.d))
}

const P_FLOOR: f64 = 1e-7;

/// `−α (1 − p)^γ log(max(p, 1e-7))` and its derivative in `p`.
fn focal_term(p: f32, cfg: &LossConfig) -> (f64, f64) {
    let p = (p as f64).clamp(0.0, 1.0);
    let (alpha, gamma) = (cfg.alpha as f64, cfg.gamma as f64);
    let q = 1.0 - p;
    let clamped = p < P_FLOOR;
    let logp = p.max(P_FLOOR).ln();
    let value = -alpha * q.powf(gamma) * logp;
    let dmod = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * logp
    };
    let dlog = if clamped { 0.0 } else { q.powf(gamma) / p };
    (value, alpha * (dmod - dlog))
}

fn check_targets(rows: usize, classes: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != rows {
        return Err(invalid!("{} targets for {rows} rows", targets.len()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= classes) {
        return Err(invalid!("target class {t} outside [0, {})", classes));
    }
    Ok(())
}

/// Summed focal loss of probability rows against target classes.
pub fn focal_loss(probs: &[Vec<f32>], targets: &[usize], cfg: &LossConfig) -> Result<f32> {
    let classes = probs.first().map_or(0, Vec::len);
    check_targets(probs.len(), classes, targets)?;
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(row, &t)| focal_term(row[t], cfg).0)
        .sum();
    Ok(total as f32)
}

/// Losses and gradients for one sample's `m` query rows.
struct SampleLoss {
    focal: f64,
    ciou: f64,
    grad_probs: Vec<f64>,
    grad_boxes: Vec<f64>,
    matching: MatchResult,
}

fn sample_loss(
    boxes: &[f32],
    probs: &[f32],
    classes: usize,
    gts: &[Target],
    cfg: &LossConfig,
) -> Result<SampleLoss> {
    let m = boxes.len() / 4;
    let background = classes - 1;
    if let Some(t) = gts.iter().find(|t| t.state >= background) {
        return Err(invalid!(
            "ground-truth state {} outside [0, {background})",
            t.state
        ));
    }
    let pred_box = |q: usize| {
        BBox::new(
            boxes[q * 4],
            boxes[q * 4 + 1],
            boxes[q * 4 + 2],
            boxes[q * 4 + 3],
        )
    };

    let mut cost = vec![vec![0.0f64; gts.len()]; m];
    for (q, row) in cost.iter_mut().enumerate() {
        for (g, t) in gts.iter().enumerate() {
            let p_cls = probs[q * classes + t.state] as f64;
            let box_cost = ciou_loss(&pred_box(q), &t.bbox)? as f64;
            row[g] = cfg.cost_class as f64 * (1.0 - p_cls) + cfg.cost_box as f64 * box_cost;
        }
    }
    let matching = hungarian_match(&cost)?;

    let mut grad_probs = vec![0.0f64; probs.len()];
    let mut focal = 0.0;
    for q in 0..m {
        let target = matching.gt_for(q).map_or(background, |g| gts[g].state);
        let (v, d) = focal_term(probs[q * classes + target], cfg);
        focal += v;
        grad_probs[q * classes + target] = d;
    }

    let mut grad_boxes = vec![0.0f64; boxes.len()];
    let mut ciou = 0.0;
    for &(q, g) in &matching.pairs {
        let (v, d) = ciou_loss_grad(&pred_box(q), &gts[g].bbox)?;
        ciou += v;
        grad_boxes[q * 4..q * 4 + 4].copy_from_slice(&d);
    }
    Ok(SampleLoss {
        focal,
        ciou,
        grad_probs,
        grad_boxes,
        matching,
    })
}

/// Loss terms reported by training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub focal: f64,
    pub ciou: f64,
    pub total: f64,
}

/// Loss of one decoded prediction against its ground truths.
pub fn total_loss(
    pred: &Prediction,
    gts: &[Target],
    cfg: &LossConfig,
) -> Result<(f32, MatchResult)> {
    let classes = pred.scores.first().map_or(0, Vec::len);
    let boxes: Vec<f32> = (0..pred.len())
        .flat_map(|q| {
            let b = pred.bbox(q);
            [b.cx, b.cy, b.w, b.h]
        })
        .collect();
    let probs: Vec<f32> = pred.scores.iter().flatten().copied().collect();
    let s = sample_loss(&boxes, &probs, classes, gts, cfg)?;
    Ok(((s.focal + cfg.lambda as f64 * s.ciou) as f32, s.matching))
}

/// Records the batch-mean loss on `tape`. `targets[b]` are the ground truths
/// of batch entry `b`. Matching is computed from current values and held
/// fixed; gradients flow into the head outputs.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    heads: &HeadOutputs,
    targets: &[Vec<Target>],
    cfg: &LossConfig,
) -> Result<(Var, LossParts, Vec<MatchResult>)> {
    let batch = heads.batch;
    if targets.len() != batch {
        return Err(invalid!(
            "{} target lists for batch of {batch}",
            targets.len()
        ));
    }
    let boxes = tape.value(heads.boxes).clone();
    let probs = tape.value(heads.probs).clone();
    if boxes
        .data()
        .iter()
        .chain(probs.data())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("model outputs are not finite".into()));
    }
    let rows = boxes.shape()[0];
    let m = rows / batch;
    let classes = probs.shape()[1];

    let mut gb = vec![0.0f32; boxes.numel()];
    let mut gp = vec![0.0f32; probs.numel()];
    let (mut focal, mut ciou) = (0.0f64, 0.0f64);
    let mut matches = Vec::with_capacity(batch);
    let scale = 1.0 / batch as f64;
    for (b, gts) in targets.iter().enumerate() {
        let bs = &boxes.data()[b * m * 4..(b + 1) * m * 4];
        let ps = &probs.data()[b * m * classes..(b + 1) * m * classes];
        let s = sample_loss(bs, ps, classes, gts, cfg)?;
        focal += s.focal * scale;
        ciou += s.ciou * scale;
        for (dst, g) in gb[b * m * 4..].iter_mut().zip(&s.grad_boxes) {
            *dst = (g * scale) as f32;
        }
        for (dst, g) in gp[b * m * classes..].iter_mut().zip(&s.grad_probs) {
            *dst = (g * scale) as f32;
        }
        matches.push(s.matching);
    }
    let total = focal + cfg.lambda as f64 * ciou;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {total}")));
    }
    let fv = tape.scalar_fn(heads.probs, focal as f32, Tensor::new(probs.shape(), gp)?)?;
    let cv = tape.scalar_fn(heads.boxes, ciou as f32, Tensor::new(boxes.shape(), gb)?)?;
    let weighted = tape.scale(cv, cfg.lambda);
    let loss = tape.add(fv, weighted)?;
    let parts = LossParts { focal, ciou, total };
    Ok((loss, parts, matches))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_values() {
        let a = BBox::new(1.0, 1.0, 2.0, 2.0);
        let b = BBox::new(2.0, 2.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-6);
        assert!((ciou_loss(&a, &b).unwrap() - 0.968254).abs() < 1e-5);
        assert_eq!(ciou_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 10.0, 1.0, 1.0)), 0.0);
        let cfg = LossConfig::default();
        let f = focal_loss(&[vec![0.9, 0.1]], &[0], &cfg).unwrap();
        assert!((f - 2.634e-4).abs() < 1e-7, "{f}");
    }

    #[test]
    fn rejects_degenerate_gt_and_bad_targets() {
        let a = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!(ciou_loss(&a, &BBox::new(1.0, 1.0, 0.0, 2.0)).is_err());
        let cfg = LossConfig::default();
        assert!(focal_loss(&[vec![0.5, 0.5]], &[2], &cfg).is_err());
    }

    #[test]
    fn focal_derivative_matches_difference_quotient() {
        let cfg = LossConfig::default();
        for p in [0.05f32, 0.3, 0.7, 0.95] {
            let h = 1e-3f32;
            let fd = (focal_term(p + h, &cfg).0 - focal_term(p - h, &cfg).0) / (2.0 * h as f64);
            let (_, d) = focal_term(p, &cfg);
            assert!(
                (fd - d).abs() < 1e-3 * d.abs().max(1.0),
                "p={p}: {fd} vs {d}"
            );
        }
    }
}
