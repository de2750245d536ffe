//! Detection evaluation: greedy matching, average precision and mAP.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul, Zero};
use serde::{Deserialize, Serialize};

use crate::boxes::{Detection, GroundTruth};

/// Confidence at which precision and recall are reported.
pub const PR_CONFIDENCE: f64 = 0.25;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Indices sorted by descending confidence; ties keep input order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    /// True-positive flag per detection, in input order.
    pub tp: Vec<bool>,
    /// Whether each ground truth was claimed.
    pub gt_matched: Vec<bool>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// Greedy matching in confidence order: each detection claims the
/// highest-IoU unclaimed same-class ground truth with IoU ≥ `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Matching {
    let mut tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] || gt.class != d.class {
                continue;
            }
            let iou = d.bbox.iou(&gt.bbox);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            tp[i] = true;
        }
    }
    Matching { tp, gt_matched }
}

/// All-point AP over TP/FP flags already in descending-confidence order.
/// `None` when there is neither ground truth nor any detection.
///
/// The sum runs in exact rational arithmetic while it fits in 128 bits and
/// falls back to `f64` otherwise.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    // Cumulative (tp, seen) at each rank.
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0u64;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as u64;
        points.push((tp, i as u64 + 1));
    }
    // Envelope: precision at rank n becomes the max precision at ranks >= n.
    let mut env: Vec<(u64, u64)> = points.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        let (a, b) = env[i];
        let (c, d) = env[i + 1];
        if (c as u128) * (b as u128) > (a as u128) * (d as u128) {
            env[i] = (c, d);
        }
    }
    Some(exact_ap(&points, &env, num_gt).unwrap_or_else(|| float_ap(&points, &env, num_gt)))
}

fn exact_ap(points: &[(u64, u64)], env: &[(u64, u64)], num_gt: usize) -> Option<f64> {
    let mut sum = Ratio::<u128>::zero();
    let mut prev_tp = 0u64;
    for (&(tp, _), &(pn, pd)) in points.iter().zip(env) {
        if tp > prev_tp {
            let step = Ratio::new((tp - prev_tp) as u128, num_gt as u128);
            let term = step.checked_mul(&Ratio::new(pn as u128, pd as u128))?;
            sum = sum.checked_add(&term)?;
            prev_tp = tp;
        }
    }
    Some(*sum.numer() as f64 / *sum.denom() as f64)
}

fn float_ap(points: &[(u64, u64)], env: &[(u64, u64)], num_gt: usize) -> f64 {
    let mut sum = 0.0;
    let mut prev_tp = 0u64;
    for (&(tp, _), &(pn, pd)) in points.iter().zip(env) {
        if tp > prev_tp {
            sum += (tp - prev_tp) as f64 * (pn as f64 / pd as f64);
            prev_tp = tp;
        }
    }
    sum / num_gt as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub map50: f64,
    pub map50_95: f64,
    /// AP@0.5 per class; `None` for classes with no ground truth and no detections.
    pub per_class_ap50: Vec<Option<f64>>,
}

/// Mean AP over classes at one IoU threshold, plus the per-class values.
pub fn mean_average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_threshold: f64,
) -> (f64, Vec<Option<f64>>) {
    // (score, image, det index, tp) per class.
    let mut scored: Vec<Vec<(f64, usize, usize, bool)>> = vec![Vec::new(); num_classes];
    let mut num_gt = vec![0usize; num_classes];
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        for gt in g {
            if gt.class < num_classes {
                num_gt[gt.class] += 1;
            }
        }
        let m = match_detections(d, g, iou_threshold);
        for (i, det) in d.iter().enumerate() {
            if det.class < num_classes {
                scored[det.class].push((det.score, img, i, m.tp[i]));
            }
        }
    }
    let per_class: Vec<Option<f64>> = scored
        .into_iter()
        .zip(&num_gt)
        .map(|(mut s, &n)| {
            s.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = s.iter().map(|x| x.3).collect();
            average_precision(&flags, n)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (mean, per_class)
}

/// Precision/recall at [`PR_CONFIDENCE`] and IoU 0.5, mAP@0.5 and mAP@0.5:0.95.
pub fn map_summary(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
) -> MapSummary {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (d, g) in dets.iter().zip(gts) {
        let kept: Vec<Detection> = d
            .iter()
            .filter(|x| x.score >= PR_CONFIDENCE)
            .copied()
            .collect();
        let m = match_detections(&kept, g, 0.5);
        tp += m.true_positives();
        fp += m.false_positives();
        fn_ += m.false_negatives();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (map50, per_class_ap50) = mean_average_precision(dets, gts, num_classes, 0.5);
    let thresholds = coco_thresholds();
    let map50_95 = thresholds
        .iter()
        .map(|&t| mean_average_precision(dets, gts, num_classes, t).0)
        .sum::<f64>()
        / thresholds.len() as f64;
    MapSummary {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        map50,
        map50_95,
        per_class_ap50,
    }
}
