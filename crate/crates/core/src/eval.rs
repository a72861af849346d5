//! Detection quality against ground truth: per-class greedy matching,
//! precision/recall, all-point interpolated AP and mAP.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{by_confidence_desc, iou, DetectionFrame, LabeledBox, WeedClass};

pub const DEFAULT_EVAL_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthFrame {
    pub frame_index: u64,
    pub boxes: Vec<LabeledBox>,
}

/// Outcome for one prediction, in the prediction's original position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    pub cls: WeedClass,
    pub confidence: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatches {
    /// Same length and order as the frame's detections.
    pub outcomes: Vec<MatchOutcome>,
    /// Ground-truth boxes left unmatched, per class index.
    pub unmatched_gt: [u64; 4],
}

/// Greedy per-class matching. Predictions are visited by descending confidence
/// (ties in input order); each takes the unmatched same-class ground truth with
/// the highest IoU (ties to the earlier box) when that IoU reaches the threshold.
pub fn match_detections(preds: &DetectionFrame, gts: &GroundTruthFrame, iou_threshold: f64) -> FrameMatches {
    let mut order: Vec<usize> = (0..preds.detections.len()).collect();
    order.sort_by(|&a, &b| by_confidence_desc(preds.detections[a].confidence, preds.detections[b].confidence));

    let mut taken = vec![false; gts.boxes.len()];
    let mut outcomes: Vec<Option<MatchOutcome>> = vec![None; preds.detections.len()];
    for k in order {
        let d = &preds.detections[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.boxes.iter().enumerate() {
            if taken[g] || gt.cls != d.cls {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let hit = match best {
            Some((g, v)) if v >= iou_threshold => {
                taken[g] = true;
                true
            }
            _ => false,
        };
        outcomes[k] = Some(MatchOutcome {
            cls: d.cls,
            confidence: d.confidence,
            true_positive: hit,
        });
    }

    let mut unmatched_gt = [0u64; 4];
    for (gt, t) in gts.boxes.iter().zip(&taken) {
        if !t {
            unmatched_gt[gt.cls.index()] += 1;
        }
    }
    FrameMatches {
        outcomes: outcomes
            .into_iter()
            .map(|o| o.expect("every prediction visited"))
            .collect(),
        unmatched_gt,
    }
}

/// All-point interpolated AP. `tp_flags` must already be ordered by descending
/// confidence. Zero when there is no ground truth.
pub fn average_precision(tp_flags: &[bool], gt_count: u64) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // Monotone envelope from the right.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<WeedClass, ClassMetrics>,
    pub map50: f64,
    pub iou_threshold: f64,
}

impl EvalReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Evaluates prediction frames against ground truth. Both sides must cover the
/// same frame indices; results do not depend on frame order.
pub fn evaluate(preds: &[DetectionFrame], gts: &[GroundTruthFrame], iou_threshold: f64) -> Result<EvalReport> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "IoU threshold {iou_threshold} not in (0, 1]"
        )));
    }
    let pred_by_index: BTreeMap<u64, &DetectionFrame> = preds.iter().map(|f| (f.frame_index, f)).collect();
    let gt_by_index: BTreeMap<u64, &GroundTruthFrame> = gts.iter().map(|f| (f.frame_index, f)).collect();
    if pred_by_index.len() != preds.len() || gt_by_index.len() != gts.len() {
        return Err(Error::FrameSetMismatch("duplicate frame index".into()));
    }
    let p_keys: BTreeSet<u64> = pred_by_index.keys().copied().collect();
    let g_keys: BTreeSet<u64> = gt_by_index.keys().copied().collect();
    if p_keys != g_keys {
        let only_p: Vec<_> = p_keys.difference(&g_keys).take(5).collect();
        let only_g: Vec<_> = g_keys.difference(&p_keys).take(5).collect();
        return Err(Error::FrameSetMismatch(format!(
            "only in predictions {only_p:?}, only in ground truth {only_g:?}"
        )));
    }

    let mut scored: [Vec<(f64, bool)>; 4] = Default::default();
    let mut gt_total = [0u64; 4];
    let mut fn_total = [0u64; 4];
    for (idx, gt) in &gt_by_index {
        let m = match_detections(pred_by_index[idx], gt, iou_threshold);
        for o in m.outcomes {
            scored[o.cls.index()].push((o.confidence, o.true_positive));
        }
        for b in &gt.boxes {
            gt_total[b.cls.index()] += 1;
        }
        for (acc, n) in fn_total.iter_mut().zip(m.unmatched_gt) {
            *acc += n;
        }
    }

    let mut per_class = BTreeMap::new();
    let mut ap_sum = 0.0;
    let mut ap_classes = 0u32;
    for cls in WeedClass::ALL {
        let k = cls.index();
        if scored[k].is_empty() && gt_total[k] == 0 {
            continue;
        }
        // Stable: equal confidences stay in frame, then detection, order.
        scored[k].sort_by(|a, b| by_confidence_desc(a.0, b.0));
        let flags: Vec<bool> = scored[k].iter().map(|s| s.1).collect();
        let tp = flags.iter().filter(|&&t| t).count() as u64;
        let fp = flags.len() as u64 - tp;
        let ap = average_precision(&flags, gt_total[k]);
        if gt_total[k] > 0 {
            ap_sum += ap;
            ap_classes += 1;
        }
        per_class.insert(
            cls,
            ClassMetrics {
                ap,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_total[k]),
                tp,
                fp,
                fn_: fn_total[k],
            },
        );
    }
    Ok(EvalReport {
        per_class,
        map50: if ap_classes == 0 {
            0.0
        } else {
            ap_sum / ap_classes as f64
        },
        iou_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, Detection};

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn preds(i: u64, d: &[(BoundingBox, WeedClass, f64)]) -> DetectionFrame {
        DetectionFrame {
            frame_index: i,
            timestamp_ms: 0,
            detections: d
                .iter()
                .map(|&(bbox, cls, confidence)| Detection { bbox, cls, confidence })
                .collect(),
        }
    }

    fn gts(i: u64, b: &[(BoundingBox, WeedClass)]) -> GroundTruthFrame {
        GroundTruthFrame {
            frame_index: i,
            boxes: b.iter().map(|&(bbox, cls)| LabeledBox { bbox, cls }).collect(),
        }
    }

    /// Enumerates every injective assignment of predictions to ground truth that
    /// respects the greedy order constraint, used to confirm the greedy choice.
    fn exhaustive_best_tp_for_top(p: &DetectionFrame, g: &GroundTruthFrame, thr: f64) -> Vec<Option<usize>> {
        fn rec(
            k: usize,
            p: &DetectionFrame,
            g: &GroundTruthFrame,
            thr: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            all: &mut Vec<Vec<Option<usize>>>,
        ) {
            if k == p.detections.len() {
                all.push(cur.clone());
                return;
            }
            cur.push(None);
            rec(k + 1, p, g, thr, used, cur, all);
            cur.pop();
            for j in 0..g.boxes.len() {
                if !used[j]
                    && g.boxes[j].cls == p.detections[k].cls
                    && iou(&p.detections[k].bbox, &g.boxes[j].bbox) >= thr
                {
                    used[j] = true;
                    cur.push(Some(j));
                    rec(k + 1, p, g, thr, used, cur, all);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut all = Vec::new();
        rec(0, p, g, thr, &mut vec![false; g.boxes.len()], &mut Vec::new(), &mut all);
        // Lexicographic preference: the most confident prediction matches first.
        all.into_iter()
            .max_by_key(|a| a.iter().map(|m| m.is_some() as u8).collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn exact_match_is_tp() {
        let b = bx(0.1, 0.1, 0.5, 0.5);
        let m = match_detections(
            &preds(0, &[(bx(0.1, 0.1, 0.5, 0.48), WeedClass::Low, 0.9)]),
            &gts(0, &[(b, WeedClass::Low)]),
            0.5,
        );
        assert!(m.outcomes[0].true_positive);
        assert_eq!(m.unmatched_gt, [0; 4]);
    }

    #[test]
    fn duplicate_prediction_is_fp() {
        let b = bx(0.1, 0.1, 0.5, 0.5);
        let p = preds(
            0,
            &[
                (bx(0.1, 0.1, 0.5, 0.49), WeedClass::High, 0.8),
                (bx(0.1, 0.1, 0.5, 0.47), WeedClass::High, 0.9),
            ],
        );
        let g = gts(0, &[(b, WeedClass::High)]);
        let m = match_detections(&p, &g, 0.5);
        assert!(!m.outcomes[0].true_positive);
        assert!(m.outcomes[1].true_positive);
        // The exhaustive oracle agrees once predictions are ordered by confidence.
        let ordered = preds(
            0,
            &[
                (p.detections[1].bbox, WeedClass::High, 0.9),
                (p.detections[0].bbox, WeedClass::High, 0.8),
            ],
        );
        assert_eq!(exhaustive_best_tp_for_top(&ordered, &g, 0.5), vec![Some(0), None]);
    }

    #[test]
    fn class_mismatch_is_fp_and_fn() {
        let b = bx(0.1, 0.1, 0.5, 0.5);
        let m = match_detections(
            &preds(0, &[(b, WeedClass::Low, 0.9)]),
            &gts(0, &[(b, WeedClass::High)]),
            0.5,
        );
        assert!(!m.outcomes[0].true_positive);
        assert_eq!(m.unmatched_gt[WeedClass::High.index()], 1);
    }

    #[test]
    fn highest_iou_ground_truth_wins() {
        let p = preds(0, &[(bx(0.0, 0.0, 0.4, 0.4), WeedClass::Low, 0.9)]);
        let g = gts(
            0,
            &[
                (bx(0.0, 0.0, 0.4, 0.5), WeedClass::Low),
                (bx(0.0, 0.0, 0.4, 0.41), WeedClass::Low),
            ],
        );
        let m = match_detections(&p, &g, 0.5);
        assert!(m.outcomes[0].true_positive);
        assert_eq!(m.unmatched_gt[0], 1);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 1), 0.0);
        assert_eq!(average_precision(&[], 0), 0.0);
        // PR points (1, .5), (.5, .5), (.67, 1.0) with 2 GT: envelope gives .5*1 + .5*(2/3).
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn ap_non_decreasing_when_fp_becomes_tp() {
        let flags = [true, false, false, true, false];
        let base = average_precision(&flags, 4);
        for k in 0..flags.len() {
            if !flags[k] {
                let mut up = flags;
                up[k] = true;
                assert!(average_precision(&up, 4) >= base);
            }
        }
    }

    #[test]
    fn evaluate_identity_and_empty() {
        let b1 = bx(0.1, 0.1, 0.3, 0.3);
        let b2 = bx(0.5, 0.5, 0.9, 0.8);
        let g = vec![
            gts(0, &[(b1, WeedClass::Low), (b2, WeedClass::High)]),
            gts(1, &[(b2, WeedClass::Medium)]),
        ];
        let p: Vec<DetectionFrame> = g
            .iter()
            .map(|f| {
                preds(
                    f.frame_index,
                    &f.boxes.iter().map(|b| (b.bbox, b.cls, 1.0)).collect::<Vec<_>>(),
                )
            })
            .collect();
        let r = evaluate(&p, &g, 0.5).unwrap();
        assert_eq!(r.map50, 1.0);
        assert!(r.per_class.values().all(|m| m.precision == 1.0 && m.recall == 1.0));

        let empty: Vec<DetectionFrame> = g.iter().map(|f| preds(f.frame_index, &[])).collect();
        let r = evaluate(&empty, &g, 0.5).unwrap();
        assert_eq!(r.map50, 0.0);
        assert!(r
            .per_class
            .values()
            .all(|m| m.precision == 0.0 && m.recall == 0.0 && m.fn_ > 0));
    }

    #[test]
    fn evaluate_rejects_mismatched_frames() {
        let p = vec![preds(0, &[]), preds(1, &[])];
        let g = vec![gts(0, &[]), gts(2, &[])];
        assert!(matches!(evaluate(&p, &g, 0.5), Err(Error::FrameSetMismatch(_))));
        assert!(evaluate(&p, &[gts(0, &[]), gts(1, &[])], 0.0).is_err());
    }

    #[test]
    fn report_json_field_names() {
        let b = bx(0.1, 0.1, 0.3, 0.3);
        let r = evaluate(
            &[preds(0, &[(b, WeedClass::Low, 0.9)])],
            &[gts(0, &[(b, WeedClass::Low)])],
            0.5,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json_string()).unwrap();
        assert_eq!(v["per_class"]["low"]["fn"], 0);
        assert_eq!(v["per_class"]["low"]["AP"], serde_json::Value::Null);
        assert_eq!(v["per_class"]["low"]["ap"], 1.0);
        assert_eq!(v["map50"], 1.0);
        assert_eq!(v["iou_threshold"], 0.5);
    }
}
