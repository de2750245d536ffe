use crate::boxes::Detection;
use crate::metrics::confidence_order;

/// Per-class greedy suppression. Survivors come back in descending
/// confidence (input order on ties), at most `max_det` of them.
pub fn nms(dets: &[Detection], iou_threshold: f64, max_det: usize) -> Vec<Detection> {
    let order = confidence_order(dets);
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() == max_det {
            break;
        }
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
