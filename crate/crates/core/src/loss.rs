//! Detection losses: BCE classification, CIoU localization and distribution
//! focal loss, combined with fixed weights, plus the center-prior assigner.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::detector::{AnchorPoint, HeadOutput};
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;
use crate::nn::ops;

/// Positive anchors must be within this many strides of the box center.
pub const CENTER_RADIUS: f64 = 2.5;
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dfl: f64,
    pub lambda_cls: f64,
    pub lambda_loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dfl: 1.0,
            lambda_cls: 0.5,
            lambda_loc: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dfl", self.lambda_dfl),
            ("lambda_cls", self.lambda_cls),
            ("lambda_loc", self.lambda_loc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn total_loss(l_dfl: f64, l_cls: f64, l_loc: f64, w: &LossWeights) -> f64 {
    w.lambda_dfl * l_dfl + w.lambda_cls * l_cls + w.lambda_loc * l_loc
}

/// Stable `-[t ln σ(z) + (1-t) ln(1-σ(z))]`.
pub fn bce_scalar(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Element-wise BCE on logits, same stable form as [`bce_scalar`].
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((logits.relu()? - (logits * targets)?)? + soft)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiouTerms {
    pub iou: f64,
    pub rho2: f64,
    pub c2: f64,
    pub v: f64,
    pub alpha: f64,
}

impl CiouTerms {
    pub fn loss(&self) -> f64 {
        1.0 - self.iou + self.rho2 / self.c2 + self.alpha * self.v
    }
}

pub fn ciou_terms(pred: &BoxXyxy, gt: &BoxXyxy) -> Result<CiouTerms> {
    for (name, b) in [("predicted", pred), ("ground-truth", gt)] {
        if !(b.width() > 0.0 && b.height() > 0.0) {
            return Err(Error::Domain(format!("CIoU needs a positive-area {name} box, got {b:?}")));
        }
    }
    let inter = pred.intersection(gt);
    let iou = inter / (pred.area() + gt.area() - inter);
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let ch = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    let c2 = cw * cw + ch * ch;
    let v = 4.0 / (PI * PI) * ((gt.width() / gt.height()).atan() - (pred.width() / pred.height()).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - iou + v) };
    Ok(CiouTerms { iou, rho2, c2, v, alpha })
}

pub fn ciou_loss(pred: &BoxXyxy, gt: &BoxXyxy) -> Result<f64> {
    Ok(ciou_terms(pred, gt)?.loss())
}

fn col(t: &Tensor, i: usize) -> Result<Tensor> {
    Ok(t.narrow(1, i, 1)?.squeeze(1)?)
}

/// Row-wise CIoU loss for `[N, 4]` corner boxes. Returns `[N]`.
pub fn ciou_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (px1, py1, px2, py2) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (gx1, gy1, gx2, gy2) = (col(gt, 0)?, col(gt, 1)?, col(gt, 2)?, col(gt, 3)?);
    let pw = (&px2 - &px1)?;
    let ph = (&py2 - &py1)?;
    let gw = (&gx2 - &gx1)?;
    let gh = (&gy2 - &gy1)?;

    let iw = (px2.minimum(&gx2)? - px1.maximum(&gx1)?)?.relu()?;
    let ih = (py2.minimum(&gy2)? - py1.maximum(&gy1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = (((&pw * &ph)? + (&gw * &gh)?)? - &inter)?;
    let iou = (&inter / (union + EPS)?)?;

    let cw = (px2.maximum(&gx2)? - px1.minimum(&gx1)?)?;
    let ch = (py2.maximum(&gy2)? - py1.minimum(&gy1)?)?;
    let c2 = ((cw.sqr()? + ch.sqr()?)? + EPS)?;
    let dx = (((&gx1 + &gx2)? - (&px1 + &px2)?)? * 0.5)?;
    let dy = (((&gy1 + &gy2)? - (&py1 + &py2)?)? * 0.5)?;
    let rho2 = (dx.sqr()? + dy.sqr()?)?;

    let at_g = ops::atan(&(&gw / (&gh + EPS)?)?)?;
    let at_p = ops::atan(&(&pw / (&ph + EPS)?)?)?;
    let v = ((at_g - at_p)?.sqr()? * (4.0 / (PI * PI)))?;
    let alpha = (&v / (((&v - &iou)? + 1.0)? + EPS)?)?;

    let loss = (((iou.neg()? + 1.0)? + (rho2 / c2)?)? + (alpha * v)?)?;
    Ok(loss)
}

fn dfl_bins(y: f64, reg_max: usize) -> Result<(usize, f64, f64)> {
    let hi = (reg_max - 1) as f64;
    if !(0.0..=hi).contains(&y) {
        return Err(Error::Domain(format!("DFL target {y} outside [0, {hi}]")));
    }
    let left = (y.floor() as usize).min(reg_max - 2);
    let wl = (left + 1) as f64 - y;
    Ok((left, wl, 1.0 - wl))
}

/// Distribution focal loss for one side given bin probabilities `s`.
pub fn dfl_from_probs(s: &[f64], y: f64) -> Result<f64> {
    let (left, wl, wr) = dfl_bins(y, s.len())?;
    let term = |w: f64, p: f64| if w == 0.0 { 0.0 } else { w * p.ln() };
    Ok(-(term(wl, s[left]) + term(wr, s[left + 1])))
}

/// Distribution focal loss on logits `[N, reg_max]` against `N` targets in
/// bin units. Returns `[N]`.
pub fn dfl_loss_tensor(logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let (n, r) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::shape("dfl", format!("{} targets for {n} distributions", targets.len())));
    }
    let mut w = vec![0f64; n * r];
    for (i, &y) in targets.iter().enumerate() {
        let (left, wl, wr) = dfl_bins(y, r)?;
        w[i * r + left] = wl;
        w[i * r + left + 1] = wr;
    }
    let w = Tensor::from_vec(w, (n, r), logits.device())?.to_dtype(logits.dtype())?;
    let logp = ops::log_softmax_last(logits)?;
    Ok((logp * w)?.sum(1)?.neg()?)
}

/// One positive anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub anchor: usize,
    pub gt: usize,
    pub class_id: usize,
    pub bbox: BoxXyxy,
    /// Left, top, right, bottom distances in stride units, clipped to
    /// `[0, reg_max - 1.01]`.
    pub targets: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssignmentResult {
    pub num_anchors: usize,
    /// Sorted by anchor index.
    pub positives: Vec<Positive>,
}

impl AssignmentResult {
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.num_anchors];
        for p in &self.positives {
            out[p.anchor] = true;
        }
        out
    }
}

/// Center-prior assignment: an anchor is positive for a box when it lies
/// strictly inside it and within [`CENTER_RADIUS`] strides of its center on
/// both axes. Among several candidate boxes the smallest area wins, then the
/// lowest index.
pub fn assign_targets(gts: &[(usize, BoxXyxy)], anchors: &[AnchorPoint], reg_max: usize) -> AssignmentResult {
    let clip = reg_max as f64 - 1.01;
    let mut positives = Vec::new();
    for (ai, a) in anchors.iter().enumerate() {
        let radius = CENTER_RADIUS * a.stride as f64;
        let mut best: Option<(f64, usize)> = None;
        for (gi, (_, b)) in gts.iter().enumerate() {
            let (cx, cy) = b.center();
            if !b.contains(a.x, a.y) || (a.x - cx).abs() >= radius || (a.y - cy).abs() >= radius {
                continue;
            }
            if best.is_none_or(|(area, _)| b.area() < area) {
                best = Some((b.area(), gi));
            }
        }
        if let Some((_, gi)) = best {
            let (class_id, b) = gts[gi];
            let s = a.stride as f64;
            let targets = [a.x - b.x1, a.y - b.y1, b.x2 - a.x, b.y2 - a.y].map(|d| (d / s).clamp(0.0, clip));
            positives.push(Positive {
                anchor: ai,
                gt: gi,
                class_id,
                bbox: b,
                targets,
            });
        }
    }
    AssignmentResult {
        num_anchors: anchors.len(),
        positives,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub dfl: f64,
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Scalar tensor carrying the graph for backpropagation.
    pub total: Tensor,
    pub parts: LossParts,
    pub num_positives: usize,
}

/// Full loss over a batch. `targets[b]` holds `(class, box)` pairs in input
/// pixels for image `b`.
///
/// Classification is summed over all anchors and classes and divided by the
/// number of positives (at least one). DFL and CIoU are averaged over
/// positives, DFL additionally over the four sides.
pub fn compute_loss(head: &HeadOutput, targets: &[Vec<(usize, BoxXyxy)>], weights: &LossWeights) -> Result<LossOutput> {
    let (cls, dist) = head.flatten()?;
    let (b, a, c) = cls.dims3()?;
    let r = head.reg_max;
    if targets.len() != b {
        return Err(Error::shape("loss", format!("{} target lists for batch of {b}", targets.len())));
    }
    let anchors = head.anchors()?;
    let (dtype, device) = (cls.dtype(), cls.device().clone());

    let mut cls_t = vec![0f32; b * a * c];
    let mut flat_idx = Vec::new();
    let mut dfl_targets = Vec::new();
    let mut anchor_xy = Vec::new();
    let mut gt_boxes = Vec::new();
    for (bi, gts) in targets.iter().enumerate() {
        for (ci, _) in gts {
            if *ci >= c {
                return Err(Error::Data(format!("class {ci} out of range for {c} classes")));
            }
        }
        let assignment = assign_targets(gts, &anchors, r);
        for p in &assignment.positives {
            cls_t[(bi * a + p.anchor) * c + p.class_id] = 1.0;
            flat_idx.push((bi * a + p.anchor) as u32);
            dfl_targets.extend_from_slice(&p.targets);
            let an = anchors[p.anchor];
            anchor_xy.extend_from_slice(&[an.x, an.y, an.stride as f64]);
            gt_boxes.extend_from_slice(&p.bbox.as_array());
        }
    }
    let n_pos = flat_idx.len();

    let cls_t = Tensor::from_vec(cls_t, (b, a, c), &Device::Cpu)?.to_dtype(dtype)?.to_device(&device)?;
    let l_cls = (bce_with_logits(&cls, &cls_t)?.sum_all()? / n_pos.max(1) as f64)?;

    let (l_dfl, l_loc) = if n_pos == 0 {
        let zero = Tensor::zeros((), dtype, &device)?;
        (zero.clone(), zero)
    } else {
        let idx = Tensor::from_vec(flat_idx, n_pos, &device)?;
        let pos = dist.reshape((b * a, 4, r))?.index_select(&idx, 0)?;
        let l_dfl = dfl_loss_tensor(&pos.reshape((n_pos * 4, r))?, &dfl_targets)?.mean_all()?;

        let bins = Tensor::arange(0u32, r as u32, &device)?.to_dtype(dtype)?;
        let d = ops::softmax_last(&pos)?.broadcast_mul(&bins)?.sum(2)?;
        let axy = Tensor::from_vec(anchor_xy, (n_pos, 3), &device)?.to_dtype(dtype)?;
        let (ax, ay, s) = (axy.narrow(1, 0, 1)?, axy.narrow(1, 1, 1)?, axy.narrow(1, 2, 1)?);
        let d = d.broadcast_mul(&s)?;
        let pred = Tensor::cat(
            &[
                (&ax - d.narrow(1, 0, 1)?)?,
                (&ay - d.narrow(1, 1, 1)?)?,
                (&ax + d.narrow(1, 2, 1)?)?,
                (&ay + d.narrow(1, 3, 1)?)?,
            ],
            1,
        )?;
        let gt = Tensor::from_vec(gt_boxes, (n_pos, 4), &device)?.to_dtype(dtype)?;
        let l_loc = ciou_loss_tensor(&pred, &gt)?.mean_all()?;
        (l_dfl, l_loc)
    };

    let total = (((&l_dfl * weights.lambda_dfl)? + (&l_cls * weights.lambda_cls)?)? + (&l_loc * weights.lambda_loc)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let parts = LossParts {
        dfl: scalar(&l_dfl)?,
        cls: scalar(&l_cls)?,
        loc: scalar(&l_loc)?,
        total: scalar(&total)?,
    };
    Ok(LossOutput {
        total,
        parts,
        num_positives: n_pos,
    })
}
