//! Training losses: box-overlap geometry on plain boxes, anchor/cell target
//! assignment, and the composite detection loss over raw head maps.

use crate::error::{Error, Result};
use crate::geometry;
use crate::model::{AnchorSet, Bbox, GroundTruth, N_ANCHORS, STRIDES};
use crate::scalar::{r, Real};
use crate::tape::{Activation, Tape, TensorId};
use crate::tensor::Tensor;

/// Matched anchors with width/height ratio to the target below this bound.
pub const ANCHOR_RATIO_LIMIT: f64 = 4.0;

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bbox: 0.05, obj: 1.0, cls: 0.5 }
    }
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    geometry::iou(a.as_array(), b.as_array())
}

pub fn ciou(pred: &Bbox, gt: &Bbox) -> f64 {
    geometry::ciou(pred.as_array(), gt.as_array())
}

pub fn ciou_loss(pred: &Bbox, gt: &Bbox) -> f64 {
    1.0 - ciou(pred, gt)
}

/// One assigned training target: a (scale, anchor, cell) slot responsible
/// for a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub scale: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub gt: usize,
}

/// Grid cell containing the target center, on every scale, for every anchor
/// whose max side ratio to the target is under [`ANCHOR_RATIO_LIMIT`]. One
/// target per slot; the first (lowest ground-truth index) wins collisions.
pub fn assign_targets(
    gts: &[GroundTruth],
    anchors: &AnchorSet,
    input_size: usize,
) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = Vec::new();
    let mut taken: std::collections::HashSet<(usize, usize, usize, usize)> =
        std::collections::HashSet::new();
    for (gi, gt) in gts.iter().enumerate() {
        let wpx = gt.bbox.w * input_size as f64;
        let hpx = gt.bbox.h * input_size as f64;
        if wpx <= 0.0 || hpx <= 0.0 {
            continue;
        }
        for (scale, &stride) in STRIDES.iter().enumerate() {
            let g = input_size / stride;
            let gx = ((gt.bbox.cx * g as f64) as usize).min(g - 1);
            let gy = ((gt.bbox.cy * g as f64) as usize).min(g - 1);
            for (anchor, &(aw, ah)) in anchors.anchors[scale].iter().enumerate() {
                let ratio = (wpx / aw).max(aw / wpx).max(hpx / ah).max(ah / hpx);
                if ratio < ANCHOR_RATIO_LIMIT && taken.insert((scale, anchor, gy, gx)) {
                    out.push(Assignment { scale, anchor, gy, gx, gt: gi });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
}

/// Composite detection loss over the three raw head maps of one image:
/// weighted CIoU loss on matched boxes, binary cross-entropy on objectness
/// (targets are the clamped CIoU of the matched prediction, zero elsewhere)
/// and on one-hot class scores of matched cells.
pub fn detection_loss<R: Real>(
    t: &mut Tape<R>,
    raws: &[TensorId; 3],
    gts: &[GroundTruth],
    anchors: &AnchorSet,
    input_size: usize,
    n_classes: usize,
    weights: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    let per = 5 + n_classes;
    for (scale, &raw) in raws.iter().enumerate() {
        let g = input_size / STRIDES[scale];
        let expect = [N_ANCHORS * per, g, g];
        if t.shape(raw) != expect.as_slice() {
            return Err(Error::shape(format!(
                "detection_loss: raw map {:?} does not match {expect:?}",
                t.shape(raw)
            )));
        }
    }
    for gt in gts {
        if gt.class_id >= n_classes {
            return Err(Error::config(format!(
                "ground-truth class {} out of range for {n_classes} classes",
                gt.class_id
            )));
        }
    }

    let assignments = assign_targets(gts, anchors, input_size);
    let total_matches = assignments.len();

    let mut obj_parts: Vec<TensorId> = Vec::with_capacity(3);
    let mut obj_target_parts: Vec<TensorId> = Vec::with_capacity(3);
    let mut cls_logit_parts: Vec<TensorId> = Vec::new();
    let mut cls_targets: Vec<R> = Vec::new();
    let mut box_terms: Vec<(TensorId, usize)> = Vec::new();

    for (scale, &raw) in raws.iter().enumerate() {
        let stride = STRIDES[scale];
        let g = input_size / stride;
        let cells = N_ANCHORS * g * g;
        let flat = |a: usize, ch: usize, gy: usize, gx: usize| ((a * per + ch) * g + gy) * g + gx;

        // objectness logits for every anchor and cell of this scale
        let mut obj_idx = Vec::with_capacity(cells);
        for a in 0..N_ANCHORS {
            for gy in 0..g {
                for gx in 0..g {
                    obj_idx.push(flat(a, 4, gy, gx));
                }
            }
        }
        let obj_logits = t.gather(raw, obj_idx, vec![cells])?;
        obj_parts.push(t.sigmoid(obj_logits));

        let matches: Vec<&Assignment> =
            assignments.iter().filter(|m| m.scale == scale).collect();
        if matches.is_empty() {
            obj_target_parts.push(t.constant(Tensor::zeros(&[cells])));
            continue;
        }

        let m = matches.len();
        let mut idx_t = [const { Vec::new() }; 4];
        let mut grid_x = Vec::with_capacity(m);
        let mut grid_y = Vec::with_capacity(m);
        let mut anchor_w = Vec::with_capacity(m);
        let mut anchor_h = Vec::with_capacity(m);
        let mut gt_flat: Vec<R> = Vec::with_capacity(4 * m);
        let mut slot_idx = Vec::with_capacity(m);
        for mt in &matches {
            for ch in 0..4 {
                idx_t[ch].push(flat(mt.anchor, ch, mt.gy, mt.gx));
            }
            grid_x.push(r::<R>(mt.gx as f64));
            grid_y.push(r::<R>(mt.gy as f64));
            let (aw, ah) = anchors.anchors[scale][mt.anchor];
            anchor_w.push(r::<R>(aw / input_size as f64));
            anchor_h.push(r::<R>(ah / input_size as f64));
            let b = gts[mt.gt].bbox;
            gt_flat.extend([r::<R>(b.cx), r::<R>(b.cy), r::<R>(b.w), r::<R>(b.h)]);
            slot_idx.push((mt.anchor * g + mt.gy) * g + mt.gx);
        }

        // decode matched cells: xy = (2s - 0.5 + grid) * stride / input,
        // wh = (2s)^2 * anchor (normalized units)
        let unit = stride as f64 / input_size as f64;
        let mut cols = Vec::with_capacity(4);
        for (ch, grid) in [(0usize, &grid_x), (1, &grid_y)] {
            let logits = t.gather(raw, idx_t[ch].clone(), vec![m])?;
            let s = t.sigmoid(logits);
            let s2 = t.scale(s, r(2.0));
            let s2 = t.add_const(s2, r(-0.5));
            let gid = t.constant(Tensor::new(vec![m], grid.clone())?);
            let centered = t.add(s2, gid)?;
            let xy = t.scale(centered, r(unit));
            cols.push(t.reshape(xy, &[m, 1])?);
        }
        for (ch, anc) in [(2usize, &anchor_w), (3, &anchor_h)] {
            let logits = t.gather(raw, idx_t[ch].clone(), vec![m])?;
            let s = t.sigmoid(logits);
            let s2 = t.scale(s, r(2.0));
            let sq = t.mul(s2, s2)?;
            let aid = t.constant(Tensor::new(vec![m], anc.clone())?);
            let wh = t.mul(sq, aid)?;
            cols.push(t.reshape(wh, &[m, 1])?);
        }
        let pred = t.concat(&cols, 1)?;

        box_terms.push((t.ciou_loss(pred, gt_flat.clone())?, m));

        // objectness target: clamped CIoU of the matched prediction,
        // scattered into the zero background
        let ciou_vals = t.ciou_values(pred, gt_flat)?;
        let clamped = t.clamp01(ciou_vals);
        obj_target_parts.push(t.scatter_add(clamped, slot_idx, cells)?);

        // class logits of matched cells against one-hot targets
        let mut cls_idx = Vec::with_capacity(m * n_classes);
        for mt in &matches {
            for k in 0..n_classes {
                cls_idx.push(flat(mt.anchor, 5 + k, mt.gy, mt.gx));
                cls_targets.push(if gts[mt.gt].class_id == k { R::one() } else { R::zero() });
            }
        }
        cls_logit_parts.push(t.gather(raw, cls_idx, vec![m * n_classes])?);
    }

    let obj_all = t.concat(&obj_parts, 0)?;
    let tgt_all = t.concat(&obj_target_parts, 0)?;
    let obj_loss = t.bce_pair(obj_all, tgt_all)?;

    let zero = t.constant(Tensor::scalar(R::zero()));
    let box_loss = if total_matches > 0 {
        let mut acc = zero;
        for (term, m) in &box_terms {
            let share = t.scale(*term, r(*m as f64 / total_matches as f64));
            acc = t.add(acc, share)?;
        }
        acc
    } else {
        zero
    };
    let cls_loss = if total_matches > 0 {
        let logits = t.concat(&cls_logit_parts, 0)?;
        let probs = t.pointwise(logits, Activation::Sigmoid);
        t.bce(probs, cls_targets)?
    } else {
        zero
    };

    let wb = t.scale(box_loss, r(weights.bbox));
    let wo = t.scale(obj_loss, r(weights.obj));
    let wc = t.scale(cls_loss, r(weights.cls));
    let partial = t.add(wb, wo)?;
    let total = t.add(partial, wc)?;

    let breakdown = LossBreakdown {
        total: t.data(total)[0].as_f64(),
        bbox: t.data(box_loss)[0].as_f64(),
        obj: t.data(obj_loss)[0].as_f64(),
        cls: t.data(cls_loss)[0].as_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_module;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Bbox {
        Bbox::new(cx, cy, w, h)
    }

    #[test]
    fn iou_ciou_hand_values() {
        assert!((iou(&b(0.5, 0.5, 0.2, 0.2), &b(0.5, 0.5, 0.2, 0.2)) - 1.0).abs() < 1e-12);
        assert_eq!(iou(&b(0.1, 0.1, 0.1, 0.1), &b(0.9, 0.9, 0.1, 0.1)), 0.0);
        let a = b(1.0, 1.0, 2.0, 2.0);
        let c = b(2.0, 2.0, 2.0, 2.0);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-9);
        // concentric same aspect: ciou == iou
        let gt = b(0.0, 0.0, 4.0, 4.0);
        let p = b(0.0, 0.0, 2.0, 2.0);
        assert!((ciou(&p, &gt) - 0.25).abs() < 1e-9);
        assert!((ciou_loss(&p, &gt) - 0.75).abs() < 1e-9);
        assert_eq!(ciou_loss(&gt, &gt), 0.0);
    }

    #[test]
    fn geometry_properties_on_random_pairs() {
        // detection-plausible boxes: extents in [0.05, 0.5] keep aspect
        // ratios within 10, where ciou stays above -1 (degenerate slivers
        // can push the exact formula toward -1.5)
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..10_000 {
            let a = b(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            );
            let c = b(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            );
            let i = iou(&a, &c);
            assert!((0.0..=1.0).contains(&i));
            assert!((i - iou(&c, &a)).abs() < 1e-12, "iou symmetric");
            let cv = ciou(&a, &c);
            assert!(cv > -1.0 && cv <= 1.0, "ciou in (-1,1], got {cv}");
            assert!(cv <= i + 1e-12, "ciou <= iou");
            let l = ciou_loss(&a, &c);
            assert!((0.0..2.0).contains(&l));
            // joint translation and uniform scaling leave iou unchanged
            let shift = |x: &Bbox| b(x.cx * 0.5 + 0.2, x.cy * 0.5 + 0.1, x.w * 0.5, x.h * 0.5);
            assert!((iou(&shift(&a), &shift(&c)) - i).abs() < 1e-9);
        }
    }

    #[test]
    fn aspect_term_zero_iff_equal_ratios() {
        // same center, same aspect, different size: ciou == iou
        let gt = b(0.5, 0.5, 0.4, 0.2);
        let p = b(0.5, 0.5, 0.2, 0.1);
        assert!((ciou(&p, &gt) - iou(&p, &gt)).abs() < 1e-9);
        // different aspect strictly reduces
        let q = b(0.5, 0.5, 0.1, 0.2);
        assert!(ciou(&q, &gt) < iou(&q, &gt) - 1e-6);
    }

    #[test]
    fn assignment_picks_center_cell_and_ratio_matched_anchors() {
        let anchors = AnchorSet::default_for(160);
        // a 32x32-pixel object at image center
        let gts = [GroundTruth { class_id: 0, bbox: b(0.5, 0.5, 0.2, 0.2) }];
        let asg = assign_targets(&gts, &anchors, 160);
        assert!(!asg.is_empty());
        for a in &asg {
            let g = 160 / STRIDES[a.scale];
            assert_eq!(a.gx, ((0.5 * g as f64) as usize).min(g - 1));
            assert_eq!(a.gy, a.gx);
            let (aw, ah) = anchors.anchors[a.scale][a.anchor];
            let ratio = (32.0f64 / aw).max(aw / 32.0).max(32.0 / ah).max(ah / 32.0);
            assert!(ratio < ANCHOR_RATIO_LIMIT);
        }
        // center exactly at 1.0 clamps into the last cell
        let edge = [GroundTruth { class_id: 0, bbox: b(1.0, 1.0, 0.2, 0.2) }];
        for a in assign_targets(&edge, &anchors, 160) {
            let g = 160 / STRIDES[a.scale];
            assert_eq!((a.gx, a.gy), (g - 1, g - 1));
        }
    }

    fn toy_raws(rng: &mut ChaCha8Rng, t: &mut Tape<f64>) -> [TensorId; 3] {
        // miniature geometry: input 32 -> grids 4, 2, 1
        let mut out = Vec::new();
        for &g in &[4usize, 2, 1] {
            let raw = Tensor::from_fn(&[21, g, g], |_| rng.gen_range(-2.0..2.0));
            out.push(t.input(raw.with_grad()));
        }
        [out[0], out[1], out[2]]
    }

    #[test]
    fn empty_targets_only_train_objectness_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut t = Tape::<f64>::new();
        let raws = toy_raws(&mut rng, &mut t);
        let anchors = AnchorSet::default_for(32);
        let (_, parts) =
            detection_loss(&mut t, &raws, &[], &anchors, 32, 2, &LossWeights::default()).unwrap();
        assert_eq!(parts.bbox, 0.0);
        assert_eq!(parts.cls, 0.0);
        assert!(parts.obj > 0.0);

        // strongly negative objectness drives the loss toward zero
        let mut t2 = Tape::<f64>::new();
        let mut ids = Vec::new();
        for &g in &[4usize, 2, 1] {
            ids.push(t2.input(Tensor::full(&[21, g, g], -40.0).with_grad()));
        }
        let raws2 = [ids[0], ids[1], ids[2]];
        let (_, parts2) =
            detection_loss(&mut t2, &raws2, &[], &anchors, 32, 2, &LossWeights::default()).unwrap();
        assert!(parts2.total < 1e-5, "{}", parts2.total);
    }

    #[test]
    fn perfect_prediction_zeroes_box_term() {
        // anchors arranged so the target matches exactly one slot: P5
        // anchor 0 (16px square at 32 input), everything else out of ratio
        let anchors = AnchorSet {
            anchors: [
                [(0.5, 0.5), (0.6, 0.6), (0.7, 0.7)],
                [(0.5, 0.5), (0.6, 0.6), (0.7, 0.7)],
                [(16.0, 16.0), (64.0, 64.0), (120.0, 120.0)],
            ],
        };
        anchors.validate().unwrap();
        let gt = GroundTruth { class_id: 1, bbox: b(0.5, 0.5, 0.5, 0.5) };
        let asg = assign_targets(&[gt], &anchors, 32);
        assert_eq!(asg.len(), 1);
        assert_eq!((asg[0].scale, asg[0].anchor), (2, 0));

        let mut t = Tape::<f64>::new();
        let mut ids = Vec::new();
        for &g in &[4usize, 2, 1] {
            ids.push(t.input(Tensor::full(&[21, g, g], -40.0).with_grad()));
        }
        // zero logits at the matched P5 slot decode exactly to the anchor
        // box at the cell center, which is the ground truth
        {
            let mut raw = t.value(ids[2]).clone();
            for ch in 0..4 {
                raw.data_mut()[ch] = 0.0;
            }
            ids[2] = t.input(raw.with_grad());
        }
        let raws = [ids[0], ids[1], ids[2]];
        let (_, parts) =
            detection_loss(&mut t, &raws, &[gt], &anchors, 32, 2, &LossWeights::default()).unwrap();
        assert!(parts.bbox.abs() < 1e-9, "box term {}", parts.bbox);
    }

    #[test]
    fn loss_finite_and_positive_at_random_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut t = Tape::<f64>::new();
        let raws = toy_raws(&mut rng, &mut t);
        let anchors = AnchorSet::default_for(32);
        let gts = [
            GroundTruth { class_id: 0, bbox: b(0.3, 0.4, 0.25, 0.3) },
            GroundTruth { class_id: 1, bbox: b(0.7, 0.6, 0.4, 0.35) },
        ];
        let (total, parts) =
            detection_loss(&mut t, &raws, &gts, &anchors, 32, 2, &LossWeights::default()).unwrap();
        assert!(t.data(total)[0].is_finite());
        assert!(parts.total > 0.0);
        t.backward(total).unwrap();
        for raw in raws {
            assert!(t.grad(raw).unwrap().iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn detection_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let anchors = AnchorSet::default_for(32);
        let gts = vec![GroundTruth { class_id: 0, bbox: b(0.42, 0.57, 0.3, 0.33) }];
        let inputs: Vec<Tensor<f64>> = [4usize, 2, 1]
            .iter()
            .map(|&g| Tensor::from_fn(&[21, g, g], |_| rng.gen_range(-1.5..1.5)))
            .collect();
        let res = check_module(
            "detection_loss",
            &mut (),
            inputs,
            |_| Vec::new(),
            |_, t, ids| {
                let raws = [ids[0], ids[1], ids[2]];
                let (total, _) =
                    detection_loss(t, &raws, &gts, &anchors, 32, 2, &LossWeights::default())?;
                Ok(total)
            },
        );
        assert!(res.passed(), "detection_loss rel err {}", res.max_rel_err);
    }

    #[test]
    fn class_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut t = Tape::<f64>::new();
        let raws = toy_raws(&mut rng, &mut t);
        let anchors = AnchorSet::default_for(32);
        let gts = [GroundTruth { class_id: 7, bbox: b(0.5, 0.5, 0.2, 0.2) }];
        assert!(detection_loss(&mut t, &raws, &gts, &anchors, 32, 2, &LossWeights::default())
            .is_err());
    }
}
