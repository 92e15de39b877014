//! Dataset labels and detection metrics: greedy matching, precision/recall,
//! average precision by exact integration of the precision envelope, and
//! mean AP across classes and IoU thresholds.

use crate::error::{Error, Result};
use crate::model::{Bbox, Detection, GroundTruth};

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Parse YOLO-format label lines: `class cx cy w h` per box, normalized.
pub fn parse_labels(text: &str) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "expected 5 fields, got {} at line {ln}",
                fields.len()
            )));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse(format!("bad class id {:?} at line {ln}", fields[0])))?;
        let mut vals = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Parse(format!("non-numeric field {f:?} at line {ln}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse(format!("coordinate {v} outside [0,1] at line {ln}")));
            }
            vals[k] = v;
        }
        out.push(GroundTruth {
            class_id,
            bbox: Bbox::new(vals[0], vals[1], vals[2], vals[3]),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matcher: detections in confidence order (ties broken by original
/// index) claim the unmatched same-class ground truth of highest IoU when
/// that IoU clears the threshold. Returns counts plus, per detection in
/// match order, (confidence, class, matched).
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> (ConfusionCounts, Vec<(f64, usize, bool)>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut gt_used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    let mut counts = ConfusionCounts::default();
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] || gt.class_id != det.class_id {
                continue;
            }
            let v = det.bbox.iou(&gt.bbox);
            let better = match best {
                None => true,
                Some((_, bv)) => v > bv,
            };
            if better {
                best = Some((gi, v));
            }
        }
        let matched = match best {
            Some((gi, v)) if v >= iou_thresh => {
                gt_used[gi] = true;
                true
            }
            _ => false,
        };
        if matched {
            counts.tp += 1;
        } else {
            counts.fp += 1;
        }
        flags.push((det.confidence, det.class_id, matched));
    }
    counts.fn_ = gt_used.iter().filter(|&&u| !u).count();
    (counts, flags)
}

/// Precision and recall; vacuous cases (no predictions, no truths) count as
/// perfect so per-image diagnostics stay total.
pub fn precision_recall(counts: &ConfusionCounts) -> (f64, f64) {
    let p = if counts.tp + counts.fp == 0 {
        1.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let r = if counts.tp + counts.fn_ == 0 {
        1.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    (p, r)
}

/// Area under the precision envelope over recall, integrated exactly across
/// every recall step. `None` when the class has no ground truth.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| flags[b].0.partial_cmp(&flags[a].0).unwrap().then(a.cmp(&b)));
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: running max from the high-recall end
    let mut env = precisions.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &r) in recalls.iter().enumerate() {
        ap += (r - prev_r) * env[i];
        prev_r = r;
    }
    Some(ap)
}

/// Mean over classes with defined AP; `None` if every class is absent.
pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub ap_per_class: Vec<Option<f64>>,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
}

/// Evaluate detections against truths over a whole split. Precision, recall
/// and the per-class APs are computed at IoU 0.5; the averaged mAP spans the
/// ten thresholds.
pub fn evaluate(
    per_image: &[(Vec<Detection>, Vec<GroundTruth>)],
    n_classes: usize,
) -> EvalReport {
    let gt_count = |class: usize| {
        per_image
            .iter()
            .map(|(_, gts)| gts.iter().filter(|g| g.class_id == class).count())
            .sum::<usize>()
    };

    let ap_at = |thresh: f64| -> Vec<Option<f64>> {
        let mut per_class_flags: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_classes];
        for (dets, gts) in per_image {
            let (_, flags) = match_detections(dets, gts, thresh);
            for (conf, class, hit) in flags {
                if class < n_classes {
                    per_class_flags[class].push((conf, hit));
                }
            }
        }
        (0..n_classes)
            .map(|c| average_precision(&per_class_flags[c], gt_count(c)))
            .collect()
    };

    let mut counts = ConfusionCounts::default();
    for (dets, gts) in per_image {
        let (c, _) = match_detections(dets, gts, 0.5);
        counts.tp += c.tp;
        counts.fp += c.fp;
        counts.fn_ += c.fn_;
    }
    let (precision, recall) = precision_recall(&counts);

    let ap50 = ap_at(0.5);
    let map50 = mean_ap(&ap50);
    let maps: Vec<Option<f64>> = iou_thresholds().iter().map(|&t| mean_ap(&ap_at(t))).collect();
    let defined: Vec<f64> = maps.iter().flatten().copied().collect();
    let map50_95 = if defined.len() == maps.len() {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    } else {
        None
    };

    EvalReport { precision, recall, ap_per_class: ap50, map50, map50_95 }
}

/// Fixed-key, tab-separated metric report.
pub fn report_text(report: &EvalReport, class_names: &[&str]) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    };
    let mut out = String::new();
    out.push_str(&format!("P\t{:.6}\n", report.precision));
    out.push_str(&format!("R\t{:.6}\n", report.recall));
    for (i, name) in class_names.iter().enumerate() {
        out.push_str(&format!("AP_{name}\t{}\n", fmt(report.ap_per_class.get(i).copied().flatten())));
    }
    out.push_str(&format!("mAP50\t{}\n", fmt(report.map50)));
    out.push_str(&format!("mAP50_95\t{}\n", fmt(report.map50_95)));
    out
}
