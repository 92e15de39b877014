//! Axis-aligned box geometry in (cx, cy, w, h) form.
//!
//! IoU and CIoU are shared between the loss tape op, the evaluation metrics
//! and NMS, so all of them agree on degenerate-box conventions:
//! zero-extent boxes have zero area, an empty union gives IoU 0, and the
//! aspect term uses atan2 so zero heights stay finite.

use crate::scalar::{r, Real};

const FOUR_OVER_PI2: f64 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);

/// Guard on the aspect-weight denominator (1 - IoU) + v. Keeps the weight
/// and its derivative bounded near simultaneous IoU -> 1, v -> 0, so the
/// loss is differentiated exactly as computed.
const ALPHA_EPS: f64 = 1e-7;

#[inline]
fn corners<R: Real>(b: [R; 4]) -> (R, R, R, R) {
    let half = r::<R>(0.5);
    (b[0] - b[2] * half, b[1] - b[3] * half, b[0] + b[2] * half, b[1] + b[3] * half)
}

/// Intersection-over-union; 0 when disjoint or the union is degenerate.
pub fn iou<R: Real>(a: [R; 4], b: [R; 4]) -> R {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(R::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(R::zero());
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > R::zero() {
        inter / union
    } else {
        R::zero()
    }
}

/// Complete IoU: IoU minus normalized center distance minus the weighted
/// aspect-ratio penalty. Coincident boxes short-circuit to 1.
pub fn ciou<R: Real>(pred: [R; 4], gt: [R; 4]) -> R {
    if pred == gt {
        return R::one();
    }
    let i = iou(pred, gt);
    let (ax1, ay1, ax2, ay2) = corners(pred);
    let (bx1, by1, bx2, by2) = corners(gt);
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + ch * ch;
    let dx = pred[0] - gt[0];
    let dy = pred[1] - gt[1];
    let rho2 = dx * dx + dy * dy;
    let center_term = if c2 > R::zero() { rho2 / c2 } else { R::zero() };
    let v = aspect_v(pred, gt);
    let alpha = v / ((R::one() - i) + v + r(ALPHA_EPS));
    i - center_term - alpha * v
}

fn aspect_v<R: Real>(pred: [R; 4], gt: [R; 4]) -> R {
    let tp = pred[2].atan2(pred[3]);
    let tg = gt[2].atan2(gt[3]);
    let diff = tg - tp;
    r::<R>(FOUR_OVER_PI2) * diff * diff
}

/// Exact d(ciou)/d(pred), differentiating through the aspect weight as well.
/// Subgradients at min/max ties pick the smaller-index branch.
pub fn ciou_grad_pred<R: Real>(pred: [R; 4], gt: [R; 4]) -> [R; 4] {
    if pred == gt {
        return [R::zero(); 4];
    }
    let zero = R::zero();
    let one = R::one();
    let half = r::<R>(0.5);
    let (ax1, ay1, ax2, ay2) = corners(pred);
    let (bx1, by1, bx2, by2) = corners(gt);

    // IoU term: derivatives w.r.t. pred corners, then mapped to cxcywh.
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let inter = if iw > zero && ih > zero { iw * ih } else { zero };
    let area_p = pred[2] * pred[3];
    let union = area_p + gt[2] * gt[3] - inter;
    let i = if union > zero { inter / union } else { zero };

    let (mut di_cx, mut di_cy, mut di_w, mut di_h) = (zero, zero, zero, zero);
    if inter > zero && union > zero {
        // corner sensitivities of the intersection
        let d_iw_ax1 = if ax1 > bx1 { -one } else { zero };
        let d_iw_ax2 = if ax2 < bx2 { one } else { zero };
        let d_ih_ay1 = if ay1 > by1 { -one } else { zero };
        let d_ih_ay2 = if ay2 < by2 { one } else { zero };
        let d_inter = |diw: R, dih: R| ih * diw + iw * dih;
        // per-corner intersection grads
        let di_ax1 = d_inter(d_iw_ax1, zero);
        let di_ax2 = d_inter(d_iw_ax2, zero);
        let di_ay1 = d_inter(zero, d_ih_ay1);
        let di_ay2 = d_inter(zero, d_ih_ay2);
        // inter in cxcywh coordinates
        let dinter_cx = di_ax1 + di_ax2;
        let dinter_cy = di_ay1 + di_ay2;
        let dinter_w = half * (di_ax2 - di_ax1);
        let dinter_h = half * (di_ay2 - di_ay1);
        // union = area_p + area_g - inter
        let dunion_cx = -dinter_cx;
        let dunion_cy = -dinter_cy;
        let dunion_w = pred[3] - dinter_w;
        let dunion_h = pred[2] - dinter_h;
        let u2 = union * union;
        di_cx = (dinter_cx * union - inter * dunion_cx) / u2;
        di_cy = (dinter_cy * union - inter * dunion_cy) / u2;
        di_w = (dinter_w * union - inter * dunion_w) / u2;
        di_h = (dinter_h * union - inter * dunion_h) / u2;
    }

    // Center-distance term rho2/c2.
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + ch * ch;
    let dx = pred[0] - gt[0];
    let dy = pred[1] - gt[1];
    let rho2 = dx * dx + dy * dy;
    let (mut dc_cx, mut dc_cy, mut dc_w, mut dc_h) = (zero, zero, zero, zero);
    if c2 > zero {
        let two = r::<R>(2.0);
        let d_cw_ax1 = if ax1 < bx1 { -one } else { zero };
        let d_cw_ax2 = if ax2 > bx2 { one } else { zero };
        let d_ch_ay1 = if ay1 < by1 { -one } else { zero };
        let d_ch_ay2 = if ay2 > by2 { one } else { zero };
        let dc2_cx = two * cw * (d_cw_ax1 + d_cw_ax2);
        let dc2_cy = two * ch * (d_ch_ay1 + d_ch_ay2);
        let dc2_w = two * cw * half * (d_cw_ax2 - d_cw_ax1);
        let dc2_h = two * ch * half * (d_ch_ay2 - d_ch_ay1);
        let drho2_cx = two * dx;
        let drho2_cy = two * dy;
        let c4 = c2 * c2;
        dc_cx = (drho2_cx * c2 - rho2 * dc2_cx) / c4;
        dc_cy = (drho2_cy * c2 - rho2 * dc2_cy) / c4;
        dc_w = (-rho2 * dc2_w) / c4;
        dc_h = (-rho2 * dc2_h) / c4;
    }

    // Aspect term alpha * v = v^2 / ((1 - iou) + v + eps), fully
    // differentiated: with D the denominator,
    //   d(alpha v) = v(2(1-iou) + v + 2 eps)/D^2 dv + (v/D)^2 d(iou)
    let v = aspect_v(pred, gt);
    let (mut dv_w, mut dv_h) = (zero, zero);
    let wh2 = pred[2] * pred[2] + pred[3] * pred[3];
    if wh2 > zero {
        let tp = pred[2].atan2(pred[3]);
        let tg = gt[2].atan2(gt[3]);
        let k = r::<R>(2.0 * FOUR_OVER_PI2) * (tg - tp);
        // d atan2(w,h)/dw = h/(w^2+h^2), /dh = -w/(w^2+h^2)
        dv_w = -k * (pred[3] / wh2);
        dv_h = k * (pred[2] / wh2);
    }
    let u = one - i;
    let eps = r::<R>(ALPHA_EPS);
    let dnm = u + v + eps;
    let p_v = v * (u + u + v + eps + eps) / (dnm * dnm);
    let q_iou = (v / dnm) * (v / dnm);
    let iou_coeff = one - q_iou;

    [
        iou_coeff * di_cx - dc_cx,
        iou_coeff * di_cy - dc_cy,
        iou_coeff * di_w - dc_w - p_v * dv_w,
        iou_coeff * di_h - dc_h - p_v * dv_h,
    ]
}
