//! Box geometry and per-image scoring.
//!
//! AP here is a per-image quantity: predictions of one frame are matched to
//! that frame's ground truth and a single precision-recall curve is built with
//! all classes pooled (matching itself stays class-aware). Sequence-level
//! quality is the plain mean of the per-frame scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of recall intervals on the interpolation grid {0, 0.01, ..., 1}.
const RECALL_STEPS: usize = 100;

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxWire", into = "BoxWire")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    class_id: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxWire {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    class_id: u32,
}

impl TryFrom<BoxWire> for BoundingBox {
    type Error = Error;

    fn try_from(w: BoxWire) -> Result<Self> {
        BoundingBox::new(w.x_min, w.y_min, w.x_max, w.y_max, w.class_id)
    }
}

impl From<BoundingBox> for BoxWire {
    fn from(b: BoundingBox) -> Self {
        BoxWire {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            class_id: b.class_id,
        }
    }
}

impl BoundingBox {
    /// Build a box, rejecting non-finite coordinates and zero or negative extent.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: u32) -> Result<Self> {
        let reason = if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            Some("non-finite coordinate")
        } else if x_min >= x_max || y_min >= y_max {
            Some("zero or negative extent")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
                reason,
            }),
            None => Ok(BoundingBox {
                x_min,
                y_min,
                x_max,
                y_max,
                class_id,
            }),
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
    pub fn class_id(&self) -> u32 {
        self.class_id
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
}

/// Intersection over union of two boxes. Class labels are ignored.
///
/// Symmetric by construction: every intermediate is computed with commutative
/// operations only.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One predicted box with its confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectionWire", into = "DetectionWire")]
pub struct Detection {
    bbox: BoundingBox,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionWire {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    class_id: u32,
    confidence: f64,
}

impl TryFrom<DetectionWire> for Detection {
    type Error = Error;

    fn try_from(w: DetectionWire) -> Result<Self> {
        let bbox = BoundingBox::new(w.x_min, w.y_min, w.x_max, w.y_max, w.class_id)?;
        Detection::new(bbox, w.confidence)
    }
}

impl From<Detection> for DetectionWire {
    fn from(d: Detection) -> Self {
        DetectionWire {
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            class_id: d.bbox.class_id,
            confidence: d.confidence,
        }
    }
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidInput(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Detection { bbox, confidence })
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    /// Same box with a different confidence.
    pub fn with_confidence(&self, confidence: f64) -> Result<Self> {
        Detection::new(self.bbox, confidence)
    }
}

/// The output of one detector on one frame, in the order it was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectionSet(pub Vec<Detection>);

impl DetectionSet {
    pub fn empty() -> Self {
        DetectionSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.0.iter()
    }

    /// Ground-truth boxes promoted to detections with a fixed confidence.
    pub fn from_boxes(boxes: &[BoundingBox], confidence: f64) -> Result<Self> {
        boxes
            .iter()
            .map(|b| Detection::new(*b, confidence))
            .collect::<Result<Vec<_>>>()
            .map(DetectionSet)
    }
}

impl FromIterator<Detection> for DetectionSet {
    fn from_iter<I: IntoIterator<Item = Detection>>(iter: I) -> Self {
        DetectionSet(iter.into_iter().collect())
    }
}

/// IoU threshold(s) at which AP is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IouThresholdSpec {
    Single(f64),
    /// {0.50, 0.55, ..., 0.95}, averaged.
    CocoRange,
}

impl IouThresholdSpec {
    pub const COCO_THRESHOLD_COUNT: usize = 10;

    pub fn single(threshold: f64) -> Result<Self> {
        if threshold > 0.0 && threshold < 1.0 {
            Ok(IouThresholdSpec::Single(threshold))
        } else {
            Err(Error::InvalidInput(format!("IoU threshold {threshold} outside (0, 1)")))
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        match *self {
            IouThresholdSpec::Single(t) => vec![t],
            IouThresholdSpec::CocoRange => (0..Self::COCO_THRESHOLD_COUNT)
                .map(|i| (50 + 5 * i) as f64 / 100.0)
                .collect(),
        }
    }

    /// The three metrics reported side by side: AP@0.7, AP@0.5, AP@0.5:0.95.
    pub fn report_columns() -> [IouThresholdSpec; 3] {
        [
            IouThresholdSpec::Single(0.7),
            IouThresholdSpec::Single(0.5),
            IouThresholdSpec::CocoRange,
        ]
    }
}

impl fmt::Display for IouThresholdSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IouThresholdSpec::Single(t) => write!(f, "{t}"),
            IouThresholdSpec::CocoRange => f.write_str("0.5:0.95"),
        }
    }
}

impl FromStr for IouThresholdSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "coco" | "0.5:0.95" => Ok(IouThresholdSpec::CocoRange),
            other => {
                let t: f64 = other
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad IoU spec `{s}`")))?;
                IouThresholdSpec::single(t)
            }
        }
    }
}

impl Serialize for IouThresholdSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IouThresholdSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Indices of `preds` in descending confidence; ties keep list order.
fn confidence_order(preds: &DetectionSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // sort_by is stable
    order.sort_by(|&a, &b| preds.0[b].confidence.total_cmp(&preds.0[a].confidence));
    order
}

/// Greedy class-aware matching.
///
/// Predictions are visited in descending confidence. Each takes the unmatched
/// ground truth of its class with the highest IoU, provided that IoU is at
/// least `threshold`. Ties in IoU go to the lower ground-truth index.
///
/// The result is in visiting order: `(prediction index, matched gt index)`.
pub fn match_greedy(preds: &DetectionSet, gts: &[BoundingBox], threshold: f64) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    confidence_order(preds)
        .into_iter()
        .map(|pi| {
            let p = &preds.0[pi].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.class_id != p.class_id {
                    continue;
                }
                let o = iou(p, g);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            let matched = best.map(|(gi, _)| {
                taken[gi] = true;
                gi
            });
            (pi, matched)
        })
        .collect()
}

/// AP at one threshold, assuming `gts` is non-empty.
fn ap_single(preds: &DetectionSet, gts: &[BoundingBox], threshold: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let matches = match_greedy(preds, gts, threshold);
    let n_gt = gts.len() as f64;

    // (recall, precision) after each prediction in confidence order
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(matches.len());
    for (rank, (_, m)) in matches.iter().enumerate() {
        if m.is_some() {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt, tp as f64 / (rank + 1) as f64));
    }

    // Running max from the right makes precision non-increasing in rank, so
    // the interpolated value at recall level r is the envelope at the first
    // point whose recall reaches r.
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }

    // Area under the interpolated step curve: each recall interval
    // ((i-1)/100, i/100] carries the interpolated precision at i/100.
    let mut area = 0.0;
    let mut cursor = 0usize;
    for step in 1..=RECALL_STEPS {
        let level = step as f64 / RECALL_STEPS as f64;
        while cursor < curve.len() && curve[cursor].0 < level {
            cursor += 1;
        }
        if cursor == curve.len() {
            break;
        }
        area += envelope[cursor];
    }
    area / RECALL_STEPS as f64
}

/// Per-image average precision.
///
/// A frame without ground truth scores 1 when nothing is predicted and 0
/// otherwise. For [`IouThresholdSpec::CocoRange`] the result is the mean over
/// the ten thresholds.
pub fn ap_image(preds: &DetectionSet, gts: &[BoundingBox], spec: IouThresholdSpec) -> f64 {
    if gts.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    match spec {
        IouThresholdSpec::Single(t) => ap_single(preds, gts, t),
        IouThresholdSpec::CocoRange => {
            let ts = spec.thresholds();
            ts.iter().map(|&t| ap_single(preds, gts, t)).sum::<f64>() / ts.len() as f64
        }
    }
}

/// Mean of per-frame AP scores.
pub fn mean_ap_per_frame(frame_scores: &[f64]) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(Error::InvalidInput("mean over an empty list of frame scores".into()));
    }
    if let Some(bad) = frame_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("frame score {bad} outside [0, 1]")));
    }
    Ok(frame_scores.iter().sum::<f64>() / frame_scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1, 0).unwrap()
    }

    fn det(b: BoundingBox, c: f64) -> Detection {
        Detection::new(b, c).unwrap()
    }

    #[test]
    fn iou_hand_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(4.0, 4.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 2.0, 0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0, 0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 2.0, 0).is_err());
        assert!(Detection::new(bx(0.0, 0.0, 1.0, 1.0), 1.5).is_err());
    }

    #[test]
    fn greedy_matching_cases() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let preds = DetectionSet(vec![det(g, 0.9)]);
        assert_eq!(match_greedy(&preds, &[g], 0.5), vec![(0, Some(0))]);

        // Both overlap the single GT; the 0.8-confidence one overlaps more but
        // the 0.9 one is visited first and takes it.
        let p_hi = bx(0.0, 0.0, 10.0, 8.0); // IoU 0.8
        let p_lo = bx(0.0, 0.0, 10.0, 9.0); // IoU 0.9
        assert!((iou(&p_hi, &g) - 0.8).abs() < 1e-12);
        assert!((iou(&p_lo, &g) - 0.9).abs() < 1e-12);
        let preds = DetectionSet(vec![det(p_lo, 0.8), det(p_hi, 0.9)]);
        assert_eq!(match_greedy(&preds, &[g], 0.5), vec![(1, Some(0)), (0, None)]);

        let other_class = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 1).unwrap();
        let gt_class2 = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 2).unwrap();
        let preds = DetectionSet(vec![det(other_class, 1.0)]);
        assert_eq!(match_greedy(&preds, &[gt_class2], 0.5), vec![(0, None)]);
    }

    #[test]
    fn confidence_ties_follow_list_order() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let preds = DetectionSet(vec![det(g, 0.5), det(g, 0.5)]);
        assert_eq!(match_greedy(&preds, &[g], 0.5), vec![(0, Some(0)), (1, None)]);
    }

    #[test]
    fn ap_hand_cases() {
        let spec = IouThresholdSpec::Single(0.5);
        assert_eq!(ap_image(&DetectionSet::empty(), &[], spec), 1.0);
        let g = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(ap_image(&DetectionSet(vec![det(g, 0.3)]), &[], spec), 0.0);
        assert_eq!(ap_image(&DetectionSet(vec![det(g, 0.9)]), &[g], spec), 1.0);
        assert_eq!(ap_image(&DetectionSet::empty(), &[g], spec), 0.0);

        let g2 = bx(50.0, 50.0, 60.0, 60.0);
        let ap = ap_image(&DetectionSet(vec![det(g, 0.9)]), &[g, g2], spec);
        assert!((ap - 0.5).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn false_positive_ranked_first_halves_precision() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let fp = bx(40.0, 40.0, 50.0, 50.0);
        let preds = DetectionSet(vec![det(g, 0.4), det(fp, 0.9)]);
        let ap = ap_image(&preds, &[g], IouThresholdSpec::Single(0.5));
        assert!((ap - 0.5).abs() < 1e-12);
        // and ranked last it costs nothing
        let preds = DetectionSet(vec![det(g, 0.9), det(fp, 0.4)]);
        assert_eq!(ap_image(&preds, &[g], IouThresholdSpec::Single(0.5)), 1.0);
    }

    #[test]
    fn coco_range_has_ten_thresholds() {
        let ts = IouThresholdSpec::CocoRange.thresholds();
        assert_eq!(ts.len(), 10);
        assert_eq!(ts[0], 0.5);
        assert_eq!(ts[9], 0.95);
    }

    #[test]
    fn iou_spec_parsing() {
        assert_eq!("coco".parse::<IouThresholdSpec>().unwrap(), IouThresholdSpec::CocoRange);
        assert_eq!(
            "0.7".parse::<IouThresholdSpec>().unwrap(),
            IouThresholdSpec::Single(0.7)
        );
        assert!("1.0".parse::<IouThresholdSpec>().is_err());
        assert!("x".parse::<IouThresholdSpec>().is_err());
        assert_eq!(IouThresholdSpec::CocoRange.to_string(), "0.5:0.95");
    }

    #[test]
    fn mean_ap_cases() {
        assert_eq!(mean_ap_per_frame(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((mean_ap_per_frame(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(mean_ap_per_frame(&[]).is_err());
        assert!(mean_ap_per_frame(&[1.2]).is_err());
    }

    #[test]
    fn detection_serializes_flat() {
        let d = det(BoundingBox::new(1.0, 2.0, 3.5, 4.0, 2).unwrap(), 0.25);
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(
            s,
            r#"{"x_min":1.0,"y_min":2.0,"x_max":3.5,"y_max":4.0,"class_id":2,"confidence":0.25}"#
        );
        assert_eq!(serde_json::from_str::<Detection>(&s).unwrap(), d);
        assert!(serde_json::from_str::<Detection>(
            r#"{"x_min":1.0,"y_min":2.0,"x_max":1.0,"y_max":4.0,"class_id":2,"confidence":0.25}"#
        )
        .is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64, 0u32..2)
            .prop_map(|(x, y, w, h, c)| BoundingBox::new(x, y, x + w, y + h, c).unwrap())
    }

    fn arb_preds() -> impl Strategy<Value = DetectionSet> {
        prop::collection::vec((arb_box(), 0.01..1.0f64), 0..8)
            .prop_map(|v| v.into_iter().map(|(b, c)| det(b, c)).collect())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn each_gt_matched_at_most_once(
            preds in arb_preds(),
            gts in prop::collection::vec(arb_box(), 0..6),
            thr in 0.05..0.95f64,
        ) {
            let m = match_greedy(&preds, &gts, thr);
            prop_assert_eq!(m.len(), preds.len());
            let mut seen = vec![false; gts.len()];
            for (_, g) in m.into_iter() {
                if let Some(g) = g {
                    prop_assert!(!seen[g]);
                    seen[g] = true;
                }
            }
        }

        #[test]
        fn ap_invariant_to_confidence_rescaling(
            preds in arb_preds(),
            gts in prop::collection::vec(arb_box(), 0..6),
            scale in 0.05..1.0f64,
        ) {
            let scaled: DetectionSet = preds
                .iter()
                .map(|d| d.with_confidence(d.confidence() * scale).unwrap())
                .collect();
            for spec in IouThresholdSpec::report_columns() {
                prop_assert_eq!(ap_image(&preds, &gts, spec), ap_image(&scaled, &gts, spec));
            }
        }

        #[test]
        fn range_is_mean_of_singles(
            preds in arb_preds(),
            gts in prop::collection::vec(arb_box(), 0..6),
        ) {
            let singles: f64 = IouThresholdSpec::CocoRange
                .thresholds()
                .into_iter()
                .map(|t| ap_image(&preds, &gts, IouThresholdSpec::Single(t)))
                .sum::<f64>() / 10.0;
            let range = ap_image(&preds, &gts, IouThresholdSpec::CocoRange);
            prop_assert!((range - singles).abs() <= 1e-12);
        }

        #[test]
        fn copied_ground_truth_is_perfect(gts in prop::collection::vec(arb_box(), 1..6)) {
            let preds = DetectionSet::from_boxes(&gts, 1.0).unwrap();
            for t in IouThresholdSpec::CocoRange.thresholds() {
                prop_assert_eq!(ap_image(&preds, &gts, IouThresholdSpec::Single(t)), 1.0);
            }
            prop_assert_eq!(ap_image(&DetectionSet::empty(), &gts, IouThresholdSpec::CocoRange), 0.0);
        }
    }
}
