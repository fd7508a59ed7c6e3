//! Detection evaluation: greedy matching, all-point interpolated average
//! precision, and the AP25 / mAP / AP75 suite.

mod io;
pub mod oracle;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};

pub use io::{read_detections, read_report, write_detections, write_report};

pub const THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::invalid("detection", format!("invalid box {:?}", self.bbox)));
        }
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid("detection", format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Marks each detection TP or FP after sorting by descending score (stable,
/// so equal scores keep insertion order). Returns the flags in that order.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruth], iou_thr: f64) -> Vec<bool> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for i in order {
        let det = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &j in by_image.get(det.image_id.as_str()).into_iter().flatten() {
            if matched[j] {
                continue;
            }
            let v = iou(&det.bbox, &gts[j].bbox);
            if v >= iou_thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
        }
        flags.push(best.is_some());
    }
    flags
}

/// Area under the monotone precision envelope of the PR curve. `None` when
/// there are no ground truths, 0 when there are ground truths but no
/// detections.
pub fn average_precision(dets: &[&Detection], gts: &[&GroundTruth], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let flags = match_detections(dets, gts, iou_thr);
    let n_gt = gts.len() as f64;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_gt: usize,
    pub num_det: usize,
    /// AP at 0.25 / 0.5 / 0.75; `None` for classes without ground truth.
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap25: f64,
    pub ap75: f64,
    pub num_classes_evaluated: usize,
    pub classes: Vec<ClassReport>,
}

impl EvalReport {
    pub fn with_class_names(mut self, names: &[String]) -> Self {
        for c in &mut self.classes {
            c.name = names.get(c.class_id).cloned();
        }
        self
    }
}

/// Per-class AP at every threshold in [`THRESHOLDS`] and their means over
/// classes that have at least one ground-truth object.
pub fn map_suite(dets: &[Detection], gts: &[GroundTruth]) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::invalid("map_suite", "no ground truth to evaluate against"));
    }
    let mut det_by_class: BTreeMap<usize, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        det_by_class.entry(d.class_id).or_default().push(d);
    }
    let mut gt_by_class: BTreeMap<usize, Vec<&GroundTruth>> = BTreeMap::new();
    for g in gts {
        gt_by_class.entry(g.class_id).or_default().push(g);
    }
    let class_ids: Vec<usize> = det_by_class
        .keys()
        .chain(gt_by_class.keys())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let classes: Vec<ClassReport> = class_ids
        .par_iter()
        .map(|&c| {
            let d = det_by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            let g = gt_by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            ClassReport {
                class_id: c,
                name: None,
                num_gt: g.len(),
                num_det: d.len(),
                ap25: average_precision(d, g, THRESHOLDS[0]),
                ap50: average_precision(d, g, THRESHOLDS[1]),
                ap75: average_precision(d, g, THRESHOLDS[2]),
            }
        })
        .collect();

    let mean = |f: fn(&ClassReport) -> Option<f64>| {
        let vals: Vec<f64> = classes.iter().filter_map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    Ok(EvalReport {
        map: mean(|c| c.ap50),
        ap25: mean(|c| c.ap25),
        ap75: mean(|c| c.ap75),
        num_classes_evaluated: gt_by_class.len(),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(image: &str, class_id: usize, b: [f64; 4], score: f64) -> Detection {
        Detection {
            image_id: image.into(),
            class_id,
            bbox: b.into(),
            score,
        }
    }

    fn gt(image: &str, class_id: usize, b: [f64; 4]) -> GroundTruth {
        GroundTruth {
            image_id: image.into(),
            class_id,
            bbox: b.into(),
        }
    }

    fn ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
        let d: Vec<&Detection> = dets.iter().collect();
        let g: Vec<&GroundTruth> = gts.iter().collect();
        average_precision(&d, &g, thr)
    }

    const G: [f64; 4] = [10.0, 10.0, 50.0, 50.0];
    const AWAY: [f64; 4] = [200.0, 200.0, 240.0, 240.0];

    #[test]
    fn hand_traced_cases() {
        let gts = [gt("a", 0, G)];
        assert_eq!(ap(&[det("a", 0, G, 0.9)], &gts, 0.5), Some(1.0));
        assert_eq!(ap(&[det("a", 0, G, 0.9), det("a", 0, AWAY, 0.8)], &gts, 0.5), Some(1.0));
        assert_eq!(ap(&[det("a", 0, AWAY, 0.9), det("a", 0, G, 0.8)], &gts, 0.5), Some(0.5));
    }

    #[test]
    fn no_detections_and_no_gts() {
        assert_eq!(ap(&[], &[gt("a", 0, G)], 0.5), Some(0.0));
        assert_eq!(ap(&[det("a", 0, G, 0.5)], &[], 0.5), None);
    }

    #[test]
    fn exact_threshold_matches() {
        // IoU exactly 0.5: [0,2]x[0,1] vs [0,1]x[0,1]
        let gts = [gt("a", 0, [0.0, 0.0, 2.0, 1.0])];
        assert_eq!(ap(&[det("a", 0, [0.0, 0.0, 1.0, 1.0], 0.5)], &gts, 0.5), Some(1.0));
    }

    #[test]
    fn detections_only_match_their_image() {
        let gts = [gt("a", 0, G)];
        assert_eq!(ap(&[det("b", 0, G, 0.9)], &gts, 0.5), Some(0.0));
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = [gt("a", 0, G), gt("a", 0, AWAY)];
        // TP, FP (duplicate), TP → PR (0.5,1), (0.5,.5), (1,2/3)
        let got = ap(&[det("a", 0, G, 0.9), det("a", 0, G, 0.8), det("a", 0, AWAY, 0.7)], &gts, 0.5).unwrap();
        assert!((got - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn suite_perfect_and_rejects_empty() {
        let gts = vec![gt("a", 0, G), gt("a", 1, AWAY), gt("b", 2, G)];
        let dets: Vec<Detection> = gts.iter().map(|g| det(&g.image_id, g.class_id, g.bbox.into(), 0.9)).collect();
        let r = map_suite(&dets, &gts).unwrap();
        assert_eq!((r.map, r.ap25, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!(r.num_classes_evaluated, 3);
        assert!(map_suite(&dets, &[]).is_err());
    }

    #[test]
    fn classes_without_gt_are_excluded_from_mean() {
        let gts = vec![gt("a", 0, G)];
        let dets = vec![det("a", 0, G, 0.9), det("a", 7, G, 0.9)];
        let r = map_suite(&dets, &gts).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.classes.len(), 2);
        assert_eq!(r.classes[1].ap50, None);
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
        let bx = (0.0..40.0f64, 0.0..40.0f64, 2.0..20.0f64, 2.0..20.0f64)
            .prop_map(|(x, y, w, h)| [x, y, x + w, y + h]);
        let gts = prop::collection::vec((0..3usize, bx.clone()), 1..8)
            .prop_map(|v| v.into_iter().map(|(i, b)| gt(&i.to_string(), 0, b)).collect::<Vec<_>>());
        let dets = prop::collection::vec((0..3usize, bx, 0.01..1.0f64), 0..10)
            .prop_map(|v| v.into_iter().map(|(i, b, s)| det(&i.to_string(), 0, b, s)).collect::<Vec<_>>());
        (dets, gts)
    }

    proptest! {
        #[test]
        fn threshold_monotonicity((dets, gts) in arb_instance()) {
            let a25 = ap(&dets, &gts, 0.25).unwrap();
            let a50 = ap(&dets, &gts, 0.5).unwrap();
            let a75 = ap(&dets, &gts, 0.75).unwrap();
            prop_assert!(a25 >= a50 && a50 >= a75);
        }

        #[test]
        fn score_scale_invariance((dets, gts) in arb_instance()) {
            let warped: Vec<Detection> = dets
                .iter()
                .map(|d| Detection { score: d.score.powi(3) * 0.5, ..d.clone() })
                .collect();
            prop_assert_eq!(ap(&dets, &gts, 0.5), ap(&warped, &gts, 0.5));
        }

        #[test]
        fn trailing_false_positive_never_helps((dets, gts) in arb_instance()) {
            let before = ap(&dets, &gts, 0.5).unwrap();
            let mut more = dets.clone();
            more.push(det("elsewhere", 0, G, 0.0));
            prop_assert!(ap(&more, &gts, 0.5).unwrap() <= before);
        }

        #[test]
        fn agrees_with_oracle((dets, gts) in arb_instance()) {
            let got = ap(&dets, &gts, 0.5).unwrap();
            let want = oracle::brute_force_ap(&dets, &gts, 0.5).unwrap();
            prop_assert!((got - want).abs() <= 1e-9);
        }
    }
}
