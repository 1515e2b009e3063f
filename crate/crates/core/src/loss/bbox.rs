use std::f64::consts::PI;

use super::LossError;
use crate::model::BBox;

/// Mean smooth-L1 over coordinates: `0.5 x^2 / beta` inside `|x| < beta`, `|x| - 0.5 beta` outside.
pub fn smooth_l1_loss(pred: &[f64], target: &[f64], beta: f64) -> Result<(f64, Vec<f64>), LossError> {
    if pred.len() != target.len() {
        return Err(LossError::DimensionMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(LossError::Empty);
    }
    if !(beta > 0.0) {
        return Err(LossError::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let x = p - t;
        if x.abs() < beta {
            value += 0.5 * x * x / beta;
            grad.push(x / beta / n);
        } else {
            value += x.abs() - 0.5 * beta;
            grad.push(x.signum() / n);
        }
    }
    Ok((value / n, grad))
}

/// `(cx, cy, w, h)` divided by the image size.
pub fn box_params_normalized(b: [f64; 4], width: f64, height: f64) -> [f64; 4] {
    [(b[0] + 0.5 * b[2]) / width, (b[1] + 0.5 * b[3]) / height, b[2] / width, b[3] / height]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiouLoss {
    pub value: f64,
    pub iou: f64,
    pub alpha: f64,
    /// Gradient with respect to the predicted `(x, y, w, h)`; `alpha` held constant.
    pub grad: [f64; 4],
}

pub fn ciou_loss(pred: &BBox, target: &BBox) -> Result<CiouLoss, LossError> {
    ciou_loss_params(pred.to_array(), target.to_array())
}

/// CIoU on raw `(x, y, w, h)` parameters; `pred` may sit anywhere on the plane.
pub fn ciou_loss_params(pred: [f64; 4], target: [f64; 4]) -> Result<CiouLoss, LossError> {
    ciou_core(pred, target, None)
}

/// CIoU with the aspect trade-off weight pinned to `alpha`. At the point where
/// `alpha` was computed this equals `ciou_loss_params`, and its exact derivative
/// is the `grad` reported there.
pub fn ciou_loss_frozen_alpha(pred: [f64; 4], target: [f64; 4], alpha: f64) -> Result<CiouLoss, LossError> {
    ciou_core(pred, target, Some(alpha))
}

pub(super) fn ciou_core(pred: [f64; 4], target: [f64; 4], frozen_alpha: Option<f64>) -> Result<CiouLoss, LossError> {
    if pred.iter().chain(&target).any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let [px, py, pw, ph] = pred;
    let [tx, ty, tw, th] = target;
    if !(pw > 0.0 && ph > 0.0 && tw > 0.0 && th > 0.0) {
        return Err(LossError::DegenerateBox);
    }
    let (pr, pb) = (px + pw, py + ph);
    let (tr, tb) = (tx + tw, ty + th);

    // Intersection extents and their partials with respect to (px, py, pw, ph).
    let (iw, diw) = overlap(px, pr, tx, tr);
    let (ih, dih) = overlap(py, pb, ty, tb);
    let inter = iw * ih;
    let d_inter = [diw[0] * ih, dih[0] * iw, diw[1] * ih, dih[1] * iw];
    let union = pw * ph + tw * th - inter;
    let d_union = [-d_inter[0], -d_inter[1], ph - d_inter[2], pw - d_inter[3]];
    let iou = inter / union;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] -= (d_inter[k] * union - inter * d_union[k]) / (union * union);
    }

    // Center distance over enclosing-box diagonal.
    let (dcx, dcy) = (px + 0.5 * pw - (tx + 0.5 * tw), py + 0.5 * ph - (ty + 0.5 * th));
    let rho2 = dcx * dcx + dcy * dcy;
    let d_rho2 = [2.0 * dcx, 2.0 * dcy, dcx, dcy];
    let (cw, dcw) = enclosing(px, pr, tx, tr);
    let (ch, dch) = enclosing(py, pb, ty, tb);
    let c2 = cw * cw + ch * ch;
    let d_c2 = [2.0 * cw * dcw[0], 2.0 * ch * dch[0], 2.0 * cw * dcw[1], 2.0 * ch * dch[1]];
    for k in 0..4 {
        grad[k] += (d_rho2[k] * c2 - rho2 * d_c2[k]) / (c2 * c2);
    }

    // Aspect consistency.
    let diff = (tw / th).atan() - (pw / ph).atan();
    let v = 4.0 / (PI * PI) * diff * diff;
    let alpha = frozen_alpha.unwrap_or(if v == 0.0 { 0.0 } else { v / ((1.0 - iou) + v) });
    let r = pw / ph;
    let datan = 1.0 / (1.0 + r * r);
    let dv_dw = 4.0 / (PI * PI) * 2.0 * diff * (-datan / ph);
    let dv_dh = 4.0 / (PI * PI) * 2.0 * diff * (datan * pw / (ph * ph));
    grad[2] += alpha * dv_dw;
    grad[3] += alpha * dv_dh;

    let value = 1.0 - iou + rho2 / c2 + alpha * v;
    Ok(CiouLoss { value, iou, alpha, grad })
}

/// Overlap of `[a0, a1]` (predicted, `a1 = a0 + a_len`) with `[b0, b1]`, and its
/// partials with respect to `(a0, a_len)`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, [f64; 2]) {
    let hi = a1.min(b1);
    let lo = a0.max(b0);
    if hi <= lo {
        return (0.0, [0.0, 0.0]);
    }
    let d_hi = if a1 < b1 { [1.0, 1.0] } else { [0.0, 0.0] };
    let d_lo = if a0 > b0 { [1.0, 0.0] } else { [0.0, 0.0] };
    (hi - lo, [d_hi[0] - d_lo[0], d_hi[1] - d_lo[1]])
}

/// Extent of the enclosing interval and its partials with respect to `(a0, a_len)`.
fn enclosing(a0: f64, a1: f64, b0: f64, b1: f64) -> (f64, [f64; 2]) {
    let d_hi = if a1 > b1 { [1.0, 1.0] } else { [0.0, 0.0] };
    let d_lo = if a0 < b0 { [1.0, 0.0] } else { [0.0, 0.0] };
    (a1.max(b1) - a0.min(b0), [d_hi[0] - d_lo[0], d_hi[1] - d_lo[1]])
}
