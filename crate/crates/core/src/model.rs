//! Detection domain types and box-level algorithms.
//!
//! Boxes are corner-form and normalized to the image: `(x_min, y_min, x_max, y_max)`
//! with the origin at the top-left corner, `x` pointing right and `y` pointing down.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default IoU above which NMS discards the lower-confidence box.
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Default inference confidence threshold.
pub const DEFAULT_CONFIDENCE: f64 = 0.70;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if ok(x_min) && ok(y_min) && ok(x_max) && ok(y_max) && x_min <= x_max && y_min <= y_max {
            Ok(Self {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            Err(Error::InvalidBox([x_min, y_min, x_max, y_max]))
        }
    }

    /// Clamps arbitrary corners into the unit square, reordering if needed.
    pub fn clamped(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        let (x0, x1) = (c(x0.min(x1)), c(x0.max(x1)));
        let (y0, y1) = (c(y0.min(y1)), c(y0.max(y1)));
        Self {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    /// The whole image.
    pub fn full() -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Overlap rectangle, or `None` when the boxes do not share positive area.
    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        (x1 > x0 && y1 > y0).then_some(BoundingBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        })
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Blackgrass classes: three density grades for mature plants plus a single seedling class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeedClass {
    Low,
    Medium,
    High,
    Seedling,
}

impl WeedClass {
    pub const ALL: [WeedClass; 4] = [WeedClass::Low, WeedClass::Medium, WeedClass::High, WeedClass::Seedling];

    /// Severity rank: Low = 1 < Medium = 2 < High = 3; Seedling ranks with Low.
    pub fn severity(self) -> u8 {
        match self {
            WeedClass::Low | WeedClass::Seedling => 1,
            WeedClass::Medium => 2,
            WeedClass::High => 3,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            WeedClass::Low => "low",
            WeedClass::Medium => "medium",
            WeedClass::High => "high",
            WeedClass::Seedling => "seedling",
        }
    }
}

impl fmt::Display for WeedClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeedClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeedClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Range(format!("unknown class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub cls: WeedClass,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, cls: WeedClass, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Range(format!("confidence {confidence} not in [0, 1]")));
        }
        Ok(Self { bbox, cls, confidence })
    }
}

/// An annotated box without a score (ground truth, training labels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BoundingBox,
    pub cls: WeedClass,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFrame {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub detections: Vec<Detection>,
}

impl DetectionFrame {
    pub fn empty(frame_index: u64, timestamp_ms: u64) -> Self {
        Self {
            frame_index,
            timestamp_ms,
            detections: Vec::new(),
        }
    }
}

/// Per-class tallies indexed by [`WeedClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts([u64; 4]);

impl ClassCounts {
    pub fn get(&self, cls: WeedClass) -> u64 {
        self.0[cls.index()]
    }

    pub fn add(&mut self, cls: WeedClass, n: u64) {
        self.0[cls.index()] += n;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Class with the highest count; ties go to the more severe class, then to
    /// declaration order (Low before Seedling). `None` when every count is zero.
    pub fn dominant(&self) -> Option<WeedClass> {
        WeedClass::ALL
            .into_iter()
            .filter(|&c| self.get(c) > 0)
            .max_by(|&a, &b| {
                self.get(a)
                    .cmp(&self.get(b))
                    .then(a.severity().cmp(&b.severity()))
                    .then(b.index().cmp(&a.index()))
            })
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a += b;
        }
    }
}

impl FromIterator<WeedClass> for ClassCounts {
    fn from_iter<I: IntoIterator<Item = WeedClass>>(iter: I) -> Self {
        let mut counts = ClassCounts::default();
        for c in iter {
            counts.add(c, 1);
        }
        counts
    }
}

/// Intersection over union; zero when both boxes are degenerate.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Keeps detections with `confidence >= threshold`, preserving order.
pub fn filter_by_confidence(frame: &DetectionFrame, threshold: f64) -> DetectionFrame {
    DetectionFrame {
        frame_index: frame.frame_index,
        timestamp_ms: frame.timestamp_ms,
        detections: frame
            .detections
            .iter()
            .filter(|d| d.confidence >= threshold)
            .copied()
            .collect(),
    }
}

/// Stable ordering by descending confidence; equal confidences keep input order.
pub(crate) fn by_confidence_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy class-agnostic non-maximum suppression.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| by_confidence_desc(a.confidence, b.confidence));

    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// Exact area of the union of `boxes`, by sweeping over distinct x edges and
/// merging the y-intervals active in each slab.
pub fn union_area(boxes: &[BoundingBox]) -> f64 {
    let boxes: Vec<&BoundingBox> = boxes.iter().filter(|b| b.area() > 0.0).collect();
    if boxes.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x_min, b.x_max]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut area = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(boxes.len());
    for slab in xs.windows(2) {
        let (x0, x1) = (slab[0], slab[1]);
        spans.clear();
        spans.extend(
            boxes
                .iter()
                .filter(|b| b.x_min <= x0 && b.x_max >= x1)
                .map(|b| (b.y_min, b.y_max)),
        );
        if spans.is_empty() {
            continue;
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let (mut lo, mut hi) = spans[0];
        for &(s0, s1) in &spans[1..] {
            if s0 > hi {
                covered += hi - lo;
                lo = s0;
                hi = s1;
            } else if s1 > hi {
                hi = s1;
            }
        }
        covered += hi - lo;
        area += covered * (x1 - x0);
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(b: BoundingBox, conf: f64) -> Detection {
        Detection::new(b, WeedClass::High, conf).unwrap()
    }

    /// Fraction of lattice cell centres of an `n`x`n` grid inside each box.
    fn pixel_iou(a: &BoundingBox, b: &BoundingBox, n: usize) -> f64 {
        let inside =
            |r: &BoundingBox, x: f64, y: f64| x >= r.x_min() && x < r.x_max() && y >= r.y_min() && y < r.y_max();
        let (mut inter, mut union) = (0u64, 0u64);
        for j in 0..n {
            let y = (j as f64 + 0.5) / n as f64;
            for i in 0..n {
                let x = (i as f64 + 0.5) / n as f64;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 0.1, 0.1), &bx(0.5, 0.5, 0.6, 0.6)), 0.0);
    }

    #[test]
    fn iou_partial_overlap_matches_enumeration() {
        let a = bx(0.0, 0.0, 0.2, 0.2);
        let b = bx(0.1, 0.1, 0.3, 0.3);
        let oracle = pixel_iou(&a, &b, 1000);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-3);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_is_zero() {
        let p = bx(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn box_rejects_inverted_and_out_of_range() {
        assert!(BoundingBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BoundingBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn confidence_filter_is_inclusive() {
        let frame = DetectionFrame {
            frame_index: 3,
            timestamp_ms: 100,
            detections: [0.69, 0.70, 0.71]
                .iter()
                .map(|&c| det(BoundingBox::full(), c))
                .collect(),
        };
        let kept = filter_by_confidence(&frame, 0.7);
        let confs: Vec<f64> = kept.detections.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.70, 0.71]);
        assert_eq!((kept.frame_index, kept.timestamp_ms), (3, 100));
        assert_eq!(filter_by_confidence(&frame, 0.0), frame);
        assert!(filter_by_confidence(&DetectionFrame::empty(0, 0), 0.7)
            .detections
            .is_empty());
    }

    #[test]
    fn nms_examples() {
        let a = det(bx(0.1, 0.1, 0.4, 0.4), 0.9);
        assert_eq!(nms(&[a], 0.45), vec![a]);

        let dup = det(bx(0.1, 0.1, 0.4, 0.4), 0.8);
        assert_eq!(nms(&[dup, a], 0.5), vec![a]);

        // A, B overlap at 0.6; B, C overlap at 0.6; A, C barely touch.
        // Widths chosen so that IoU(A,B) = IoU(B,C) = 0.6 along one axis.
        let a = det(bx(0.0, 0.0, 0.4, 1.0), 0.9);
        let b = det(bx(0.1, 0.0, 0.5, 1.0), 0.8);
        let c = det(bx(0.2, 0.0, 0.6, 1.0), 0.7);
        assert!((iou(&a.bbox, &b.bbox) - 0.6).abs() < 1e-12);
        assert!((iou(&b.bbox, &c.bbox) - 0.6).abs() < 1e-12);
        assert!(iou(&a.bbox, &c.bbox) < 0.5);
        assert_eq!(nms(&[c, b, a], 0.5), vec![a, c]);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = det(bx(0.1, 0.1, 0.4, 0.4), 0.8);
        let b = det(bx(0.1, 0.1, 0.4, 0.4), 0.8);
        let kept = nms(&[b, a], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], b);
    }

    #[test]
    fn dominant_tie_breaks_toward_severity() {
        let counts: ClassCounts = [WeedClass::Low, WeedClass::Low, WeedClass::High].into_iter().collect();
        assert_eq!(counts.dominant(), Some(WeedClass::Low));
        let counts: ClassCounts = [WeedClass::Low, WeedClass::High].into_iter().collect();
        assert_eq!(counts.dominant(), Some(WeedClass::High));
        let counts: ClassCounts = [WeedClass::Seedling, WeedClass::Low].into_iter().collect();
        assert_eq!(counts.dominant(), Some(WeedClass::Low));
        assert_eq!(ClassCounts::default().dominant(), None);
    }

    #[test]
    fn union_area_handles_nesting_and_gaps() {
        let outer = bx(0.0, 0.0, 0.5, 0.5);
        let inner = bx(0.1, 0.1, 0.2, 0.2);
        assert!((union_area(&[outer, inner]) - 0.25).abs() < 1e-15);
        let far = bx(0.6, 0.6, 0.7, 0.8);
        assert!((union_area(&[outer, far]) - (0.25 + 0.02)).abs() < 1e-12);
        let overlap = bx(0.25, 0.0, 0.75, 0.5);
        assert!((union_area(&[outer, overlap]) - 0.375).abs() < 1e-12);
        assert_eq!(union_area(&[]), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c, d)| BoundingBox::clamped(a, b, c, d))
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec((arb_box(), 0.0..1.0f64), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(b, c)| Detection::new(b, WeedClass::Low, c).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn filter_idempotent_and_composes(dets in arb_dets(), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
            let frame = DetectionFrame { frame_index: 0, timestamp_ms: 0, detections: dets };
            let once = filter_by_confidence(&frame, t1);
            prop_assert_eq!(filter_by_confidence(&once, t1), once.clone());
            prop_assert_eq!(
                filter_by_confidence(&once, t2),
                filter_by_confidence(&frame, t1.max(t2))
            );
        }

        #[test]
        fn nms_subset_and_separated(dets in arb_dets(), thr in 0.0..1.0f64) {
            let kept = nms(&dets, thr);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                }
            }
        }

        #[test]
        fn nms_permutation_invariant(dets in arb_dets(), thr in 0.0..1.0f64, rot in 0usize..12) {
            let mut confs: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
            confs.sort_by(f64::total_cmp);
            confs.dedup();
            prop_assume!(confs.len() == dets.len());
            let mut shuffled = dets.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            prop_assert_eq!(nms(&dets, thr), nms(&shuffled, thr));
        }
    }
}
