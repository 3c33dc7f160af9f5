//! Brute-force open-set metrics. Matching is redone from scratch for every
//! score threshold, and precision envelopes come from a per-rank scan, so
//! nothing is shared with the incremental sweeps in the library.

use std::collections::BTreeMap;

use openset_core::eval::{ClassRegistry, Detection, EvalOptions, GroundTruth};

/// The evaluator's numbers, recomputed the slow way.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowReport {
    pub wi: f64,
    pub wi_recall_met: bool,
    pub tp_k: usize,
    pub fp_u: usize,
    pub fp_k: usize,
    pub aose: usize,
    pub map_k: f64,
    pub per_class_ap: BTreeMap<i64, f64>,
    pub ap_unknown: f64,
}

fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let overlap_w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let overlap_h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if overlap_w <= 0.0 || overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = overlap_w * overlap_h;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Rank order: best score first, input order on ties.
fn ranked(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// TP flag per detection (input order): walking detections best first, each
/// claims the still-free ground truth in its image with the highest IoU
/// reaching the threshold, earliest listed on exact ties.
fn match_flags(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> Vec<bool> {
    let mut free = vec![true; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &d in &ranked(dets) {
        let det = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (slot, gt) in gts.iter().enumerate() {
            if !free[slot] || gt.image_id != det.image_id {
                continue;
            }
            let v = iou(det.bbox.as_array(), gt.bbox.as_array());
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((slot, v));
            }
        }
        if let Some((slot, _)) = best {
            free[slot] = false;
            tp[d] = true;
        }
    }
    tp
}

/// All-point interpolated AP, the envelope rescanned from every
/// true-positive rank outward.
fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> f64 {
    let n_gt = gts.len();
    if n_gt == 0 {
        return 0.0;
    }
    let tp = match_flags(dets, gts, thr);
    let order = ranked(dets);
    let mut cum = Vec::with_capacity(order.len());
    let mut running = 0usize;
    for &d in &order {
        if tp[d] {
            running += 1;
        }
        cum.push(running);
    }
    let mut ap = 0.0;
    for (rank, &d) in order.iter().enumerate() {
        if !tp[d] {
            continue;
        }
        let mut envelope = 0.0f64;
        for (j, &c) in cum.iter().enumerate().skip(rank) {
            envelope = envelope.max(c as f64 / (j + 1) as f64);
        }
        ap += envelope / n_gt as f64;
    }
    ap
}

pub fn report(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    registry: &ClassRegistry,
    options: &EvalOptions,
) -> SlowReport {
    let floored: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.score >= options.score_floor)
        .collect();
    let thr = options.iou_threshold;

    let gts_of = |cat: i64| -> Vec<&GroundTruth> {
        ground_truths.iter().filter(|g| g.category_id == cat).collect()
    };
    let dets_of = |cat: i64, theta: f64| -> Vec<&Detection> {
        floored
            .iter()
            .copied()
            .filter(|d| d.category_id == cat && d.score >= theta)
            .collect()
    };

    let mut per_class_ap = BTreeMap::new();
    let mut ap_sum = 0.0;
    for &cat in registry.known() {
        let gts = gts_of(cat);
        if gts.is_empty() {
            continue;
        }
        let ap = average_precision(&dets_of(cat, 0.0), &gts, thr);
        ap_sum += ap;
        per_class_ap.insert(cat, ap);
    }
    let map_k = if per_class_ap.is_empty() {
        0.0
    } else {
        ap_sum / per_class_ap.len() as f64
    };

    let unknown_gts = gts_of(registry.unknown_id());
    let ap_unknown = average_precision(&dets_of(registry.unknown_id(), 0.0), &unknown_gts, thr);

    let n_known_gt: usize = registry.known().iter().map(|&c| gts_of(c).len()).sum();
    let recall_at = |theta: f64| -> f64 {
        if n_known_gt == 0 {
            return 1.0;
        }
        let mut matched = 0usize;
        for &cat in registry.known() {
            let gts = gts_of(cat);
            let flags = match_flags(&dets_of(cat, theta), &gts, thr);
            matched += flags.iter().filter(|&&t| t).count();
        }
        matched as f64 / n_known_gt as f64
    };

    // Exhaustive sweep: try every distinct known-detection score and keep
    // the largest that still reaches the recall level.
    let mut thresholds: Vec<f64> = floored
        .iter()
        .filter(|d| registry.is_known(d.category_id))
        .map(|d| d.score)
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut chosen: Option<f64> = None;
    for &theta in &thresholds {
        if recall_at(theta) >= options.recall_level && chosen.is_none_or(|c| theta > c) {
            chosen = Some(theta);
        }
    }
    let wi_recall_met = chosen.is_some() || (n_known_gt == 0 && thresholds.is_empty());
    let theta = chosen.or(thresholds.last().copied());

    let (mut tp_k, mut fp_u, mut fp_k) = (0usize, 0usize, 0usize);
    if let Some(theta) = theta {
        for &cat in registry.known() {
            let dets = dets_of(cat, theta);
            let gts = gts_of(cat);
            let flags = match_flags(&dets, &gts, thr);
            for (det, &is_tp) in dets.iter().zip(&flags) {
                if is_tp {
                    tp_k += 1;
                } else if unknown_gts.iter().any(|g| {
                    g.image_id == det.image_id
                        && iou(det.bbox.as_array(), g.bbox.as_array()) >= thr
                }) {
                    fp_u += 1;
                } else {
                    fp_k += 1;
                }
            }
        }
    }
    let wi = if tp_k + fp_k > 0 {
        100.0 * fp_u as f64 / (tp_k + fp_k) as f64
    } else {
        0.0
    };

    // Open-set error count: every surviving known-labeled detection may
    // claim one unknown object, best score first, each object at most once.
    // Category plays no role, so this is plain matching.
    let known_dets: Vec<&Detection> = floored
        .iter()
        .copied()
        .filter(|d| registry.is_known(d.category_id))
        .collect();
    let aose = match_flags(&known_dets, &unknown_gts, thr)
        .iter()
        .filter(|&&t| t)
        .count();

    SlowReport {
        wi,
        wi_recall_met,
        tp_k,
        fp_u,
        fp_k,
        aose,
        map_k,
        per_class_ap,
        ap_unknown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use openset_core::eval::BBox;

    fn unit_box(x: f64) -> BBox {
        BBox::new(x, 0.0, 1.0, 1.0).unwrap()
    }

    fn det(image_id: i64, cat: i64, score: f64, x: f64) -> Detection {
        Detection {
            image_id,
            category_id: cat,
            score,
            bbox: unit_box(x),
        }
    }

    fn gt(id: i64, image_id: i64, cat: i64, x: f64) -> GroundTruth {
        GroundTruth {
            id,
            image_id,
            category_id: cat,
            bbox: unit_box(x),
        }
    }

    fn registry() -> ClassRegistry {
        ClassRegistry::new(vec![1], 9).unwrap()
    }

    #[test]
    fn ap_of_tp_fp_tp_over_two_objects_is_five_sixths() {
        let gts = vec![gt(1, 0, 1, 0.0), gt(2, 0, 1, 5.0)];
        let dets = vec![
            det(0, 1, 0.9, 0.0),
            det(0, 1, 0.8, 50.0),
            det(0, 1, 0.7, 5.0),
        ];
        let r = report(&dets, &gts, &registry(), &EvalOptions::default());
        assert!((r.per_class_ap[&1] - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.map_k - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn a_false_positive_on_an_unknown_raises_wi() {
        // Recall 0.8 needs both true positives, so the sweep settles on
        // 0.8 and keeps the detection sitting on the unknown object:
        // TP=2, FP_U=1, FP_K=0.
        let gts = vec![gt(1, 0, 1, 0.0), gt(2, 0, 9, 5.0), gt(3, 0, 1, 7.0)];
        let dets = vec![
            det(0, 1, 0.9, 0.0),
            det(0, 1, 0.8, 7.0),
            det(0, 1, 0.8, 5.0),
        ];
        let r = report(&dets, &gts, &registry(), &EvalOptions::default());
        assert!(r.wi_recall_met);
        assert_eq!((r.tp_k, r.fp_u, r.fp_k), (2, 1, 0));
        assert_eq!(r.wi, 50.0);
        assert_eq!(r.aose, 1);
    }

    #[test]
    fn each_unknown_object_is_counted_once() {
        let gts = vec![gt(1, 0, 9, 0.0)];
        let dets = vec![det(0, 1, 0.9, 0.0), det(0, 1, 0.8, 0.2)];
        let r = report(&dets, &gts, &registry(), &EvalOptions::default());
        assert_eq!(r.aose, 1);
    }

    #[test]
    fn unknown_detections_score_against_merged_unknowns() {
        let gts = vec![gt(1, 0, 9, 0.0), gt(2, 1, 9, 3.0), gt(3, 0, 1, 7.0)];
        let dets = vec![det(0, 9, 0.9, 0.0), det(1, 9, 0.8, 3.0), det(0, 1, 0.9, 7.0)];
        let r = report(&dets, &gts, &registry(), &EvalOptions::default());
        assert_eq!(r.ap_unknown, 1.0);
        assert_eq!(r.wi, 0.0);
    }
}
