//! Differentiable training losses for the four heads: pose loss for P,
//! complete-IoU for B, and pixel-wise MSE for H and S.
//!
//! Each loss returns its scalar value together with analytic gradients with
//! respect to the prediction; the training loop feeds those gradients into
//! the tape as backward seeds.

use crate::geometry::Pose;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("raw quaternion norm {0} is too small")]
    DegenerateQuaternion(f64),
    #[error("box has non-positive extent w={w}, h={h}")]
    InvalidBox { w: f64, h: f64 },
    #[error("prediction has {pred} elements but ground truth has {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("ground-truth translation has zero norm")]
    ZeroNormTranslation,
}

/// Axis-aligned box in center-size parameterization (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, LossError> {
        if !(w > 0.0 && h > 0.0) {
            return Err(LossError::InvalidBox { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }
}

/// Pose-loss value and gradients with respect to the 7 raw prediction inputs.
#[derive(Debug, Clone, Copy)]
pub struct SpeedLoss {
    pub value: f64,
    pub d_q_raw: [f64; 4],
    pub d_t: Vector3<f64>,
}

/// Pose loss: geodesic rotation distance of the normalized raw quaternion
/// plus range-normalized translation error (the same composite used as the
/// evaluation score).
///
/// The arccos derivative is evaluated at an argument clamped to `1 - 1e-7`
/// so the gradient stays finite as predictions align with the ground truth;
/// the value itself uses the unclamped (domain-limited) argument and is 0 at
/// a perfect prediction.
pub fn speed_loss(q_raw: [f64; 4], t: Vector3<f64>, gt: &Pose) -> Result<SpeedLoss, LossError> {
    let n2: f64 = q_raw.iter().map(|v| v * v).sum();
    let n = n2.sqrt();
    if !(n >= 1e-8) {
        return Err(LossError::DegenerateQuaternion(n));
    }
    let t_gt = gt.translation();
    let t_gt_norm = t_gt.norm();
    if t_gt_norm <= 0.0 {
        return Err(LossError::ZeroNormTranslation);
    }

    let q_gt = gt.quat().to_array();
    let u: f64 = q_raw.iter().zip(q_gt).map(|(a, b)| a * b).sum();
    let s = u / n;
    let d = s.abs();

    let value_rot = 2.0 * d.min(1.0).acos();
    let a_grad = d.min(1.0 - 1e-7);
    let dacos = -2.0 / (1.0 - a_grad * a_grad).sqrt();
    let sign = if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    };
    let mut d_q_raw = [0.0; 4];
    for i in 0..4 {
        let ds_dqi = q_gt[i] / n - u * q_raw[i] / (n2 * n);
        d_q_raw[i] = dacos * sign * ds_dqi;
    }

    let diff = t - t_gt;
    let dist = diff.norm();
    let value_t = dist / t_gt_norm;
    let d_t = if dist > 1e-12 { diff / (dist * t_gt_norm) } else { Vector3::zeros() };

    Ok(SpeedLoss { value: value_rot + value_t, d_q_raw, d_t })
}

/// C-IoU value and gradients with respect to the predicted box parameters.
#[derive(Debug, Clone, Copy)]
pub struct CiouLoss {
    pub value: f64,
    pub d_pred: [f64; 4],
    pub iou: f64,
    /// Trade-off coefficient of the aspect term, constant in the backward pass.
    pub alpha: f64,
}

/// Geometric pieces of the C-IoU value shared by the loss and its
/// frozen-alpha finite-difference oracle.
fn ciou_terms(pred: &BBox, gt: &BBox) -> Result<(f64, f64, f64), LossError> {
    if !(pred.w > 0.0 && pred.h > 0.0) {
        return Err(LossError::InvalidBox { w: pred.w, h: pred.h });
    }
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(LossError::InvalidBox { w: gt.w, h: gt.h });
    }
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = pred.w * pred.h + gt.w * gt.h - inter;
    let iou = inter / union;
    let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let ew = px2.max(gx2) - px1.min(gx1);
    let eh = py2.max(gy2) - py1.min(gy1);
    let c2 = ew * ew + eh * eh;
    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let delta = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let v = four_over_pi2 * delta * delta;
    Ok((iou, rho2 / c2, v))
}

/// C-IoU value with the aspect trade-off frozen at `alpha`. This is the
/// function whose derivative the backward pass of [`ciou_loss`] computes, so
/// finite-difference checks must difference this rather than the full loss.
pub fn ciou_value_frozen_alpha(pred: &BBox, gt: &BBox, alpha: f64) -> Result<f64, LossError> {
    let (iou, center_term, v) = ciou_terms(pred, gt)?;
    Ok(1.0 - iou + center_term + alpha * v)
}

/// Complete-IoU loss: `1 - IoU + rho^2/c^2 + alpha*v`, where `rho` is the
/// center distance, `c` the enclosing-box diagonal, and `v` the aspect-ratio
/// penalty. `alpha = v / ((1 - IoU) + v)` is treated as a constant in the
/// backward pass.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<CiouLoss, LossError> {
    if !(pred.w > 0.0 && pred.h > 0.0) {
        return Err(LossError::InvalidBox { w: pred.w, h: pred.h });
    }
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(LossError::InvalidBox { w: gt.w, h: gt.h });
    }
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();

    // Corner partials w.r.t. (cx, cy, w, h): x1 = cx - w/2, x2 = cx + w/2.
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = pred.w * pred.h + gt.w * gt.h - inter;
    let iou = inter / union;

    // d inter / d pred, nonzero only for overlapping boxes.
    let (mut di_dcx, mut di_dcy, mut di_dw, mut di_dh) = (0.0, 0.0, 0.0, 0.0);
    if iw > 0.0 && ih > 0.0 {
        let right_inside = if px2 < gx2 { 1.0 } else { 0.0 };
        let left_inside = if px1 > gx1 { 1.0 } else { 0.0 };
        let bot_inside = if py2 < gy2 { 1.0 } else { 0.0 };
        let top_inside = if py1 > gy1 { 1.0 } else { 0.0 };
        let diw_dcx = right_inside - left_inside;
        let diw_dw = 0.5 * (right_inside + left_inside);
        let dih_dcy = bot_inside - top_inside;
        let dih_dh = 0.5 * (bot_inside + top_inside);
        di_dcx = diw_dcx * ih;
        di_dw = diw_dw * ih;
        di_dcy = dih_dcy * iw;
        di_dh = dih_dh * iw;
    }
    let du_dcx = -di_dcx;
    let du_dcy = -di_dcy;
    let du_dw = pred.h - di_dw;
    let du_dh = pred.w - di_dh;
    let diou = |di: f64, du: f64| (di * union - inter * du) / (union * union);
    let diou_d = [
        diou(di_dcx, du_dcx),
        diou(di_dcy, du_dcy),
        diou(di_dw, du_dw),
        diou(di_dh, du_dh),
    ];

    let rho2 = (pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2);
    let drho2 = [2.0 * (pred.cx - gt.cx), 2.0 * (pred.cy - gt.cy), 0.0, 0.0];

    let ex1 = px1.min(gx1);
    let ey1 = py1.min(gy1);
    let ex2 = px2.max(gx2);
    let ey2 = py2.max(gy2);
    let ew = ex2 - ex1;
    let eh = ey2 - ey1;
    let c2 = ew * ew + eh * eh;
    let p_right = if px2 > gx2 { 1.0 } else { 0.0 };
    let p_left = if px1 < gx1 { 1.0 } else { 0.0 };
    let p_bot = if py2 > gy2 { 1.0 } else { 0.0 };
    let p_top = if py1 < gy1 { 1.0 } else { 0.0 };
    let dew = [p_right - p_left, 0.0, 0.5 * (p_right + p_left), 0.0];
    let deh = [0.0, p_bot - p_top, 0.0, 0.5 * (p_bot + p_top)];
    let mut dc2 = [0.0; 4];
    for i in 0..4 {
        dc2[i] = 2.0 * ew * dew[i] + 2.0 * eh * deh[i];
    }

    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let delta = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let v = four_over_pi2 * delta * delta;
    let wh2 = pred.w * pred.w + pred.h * pred.h;
    let dv_dw = -2.0 * four_over_pi2 * delta * (pred.h / wh2);
    let dv_dh = 2.0 * four_over_pi2 * delta * (pred.w / wh2);
    let alpha = if v > 0.0 { v / ((1.0 - iou) + v) } else { 0.0 };

    let value = 1.0 - iou + rho2 / c2 + alpha * v;
    let mut d_pred = [0.0; 4];
    for i in 0..4 {
        let dratio = (drho2[i] * c2 - rho2 * dc2[i]) / (c2 * c2);
        d_pred[i] = -diou_d[i] + dratio;
    }
    d_pred[2] += alpha * dv_dw;
    d_pred[3] += alpha * dv_dh;

    Ok(CiouLoss { value, d_pred, iou, alpha })
}

/// Mean squared error over all elements, with gradient `2 (pred - gt) / N`.
pub fn pixel_mse(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(LossError::ShapeMismatch { pred: pred.len(), gt: gt.len() });
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let diff = p - g;
        value += diff * diff;
        grad.push(2.0 * diff / n);
    }
    Ok((value / n, grad))
}
