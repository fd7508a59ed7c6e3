//! Second-stage targets: IoU assignment of proposals to ground truth and
//! the fixed-budget positive/negative sampler.

use rand::Rng;

use super::config::RoiConfig;
use super::model::ImageRoi;
use super::rpn::sample_subset;
use crate::boxes::{encode_deltas, iou, BBox};

/// Label convention: 0 is background, class `c` is `c + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub label: usize,
    /// Normalized regression target; zero for background.
    pub target: [f64; 4],
    pub max_iou: f64,
}

/// Assigns each proposal to its highest-IoU ground truth (ties to the lower
/// index). Positive iff that IoU reaches `pos_iou`; background iff it is
/// below `neg_iou`; anything in between is returned with `label == usize::MAX`
/// and is never sampled.
pub fn assign_targets(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    cfg: &RoiConfig,
) -> Vec<Assignment> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt_boxes.iter().enumerate() {
                let v = iou(p, g);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= cfg.pos_iou => {
                    let d = encode_deltas(p, &gt_boxes[j]);
                    let mut target = [0.0; 4];
                    for (t, (dv, s)) in target.iter_mut().zip(d.iter().zip(&cfg.target_stds)) {
                        *t = dv / s;
                    }
                    Assignment {
                        label: gt_classes[j] + 1,
                        target,
                        max_iou: v,
                    }
                }
                Some((_, v)) if v >= cfg.neg_iou => Assignment {
                    label: usize::MAX,
                    target: [0.0; 4],
                    max_iou: v,
                },
                other => Assignment {
                    label: 0,
                    target: [0.0; 4],
                    max_iou: other.map_or(0.0, |(_, v)| v),
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledRois {
    pub rois: Vec<ImageRoi>,
    pub labels: Vec<usize>,
    /// `4·R` normalized targets, zero rows for background.
    pub targets: Vec<f64>,
    /// Rows of `rois` that are positive.
    pub positive_rows: Vec<usize>,
}

impl SampledRois {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }
}

/// Per image: optionally append the gt boxes to the proposals, assign, then
/// keep at most `num_samples` RoIs with at most `pos_fraction` positives.
/// Positives come first within each image.
pub fn sample_rois(
    proposals: &[Vec<BBox>],
    gt_boxes: &[Vec<BBox>],
    gt_classes: &[Vec<usize>],
    cfg: &RoiConfig,
    rng: &mut impl Rng,
) -> SampledRois {
    let mut out = SampledRois {
        rois: Vec::new(),
        labels: Vec::new(),
        targets: Vec::new(),
        positive_rows: Vec::new(),
    };
    for (n, props) in proposals.iter().enumerate() {
        let mut candidates = props.clone();
        if cfg.add_gt_as_proposals {
            candidates.extend(gt_boxes[n].iter().copied());
        }
        let assigned = assign_targets(&candidates, &gt_boxes[n], &gt_classes[n], cfg);
        let pos: Vec<usize> = (0..assigned.len())
            .filter(|&i| assigned[i].label != 0 && assigned[i].label != usize::MAX)
            .collect();
        let neg: Vec<usize> = (0..assigned.len()).filter(|&i| assigned[i].label == 0).collect();
        let max_pos = (cfg.num_samples as f64 * cfg.pos_fraction) as usize;
        let pos = sample_subset(&pos, max_pos, rng);
        let neg = sample_subset(&neg, cfg.num_samples - pos.len(), rng);
        for &i in pos.iter().chain(&neg) {
            if assigned[i].label != 0 {
                out.positive_rows.push(out.rois.len());
            }
            out.rois.push(ImageRoi {
                batch: n,
                bbox: candidates[i],
            });
            out.labels.push(assigned[i].label);
            out.targets.extend(assigned[i].target);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GT: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 2.0,
        y2: 2.0,
    };

    #[test]
    fn identical_disjoint_and_weak_overlap() {
        let cfg = RoiConfig::default();
        let props = [GT, BBox::new(10.0, 10.0, 12.0, 12.0), BBox::new(1.0, 1.0, 3.0, 3.0)];
        let a = assign_targets(&props, &[GT], &[4], &cfg);
        assert_eq!(a[0].label, 5);
        assert_eq!(a[0].target, [0.0; 4]);
        assert_eq!(a[1].label, 0);
        assert_eq!(a[2].label, 0);
        assert!((a[2].max_iou - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn no_ground_truth_is_all_background() {
        let a = assign_targets(&[GT], &[], &[], &RoiConfig::default());
        assert_eq!(a[0].label, 0);
    }

    #[test]
    fn targets_are_normalized_deltas() {
        let cfg = RoiConfig::default();
        let p = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g = BBox::new(1.0, 0.0, 11.0, 10.0);
        let a = assign_targets(&[p], &[g], &[0], &cfg);
        assert!((a[0].target[0] - 0.1 / 0.1).abs() < 1e-12);
        assert_eq!(a[0].target[2], 0.0);
    }

    #[test]
    fn sampler_budget() {
        let cfg = RoiConfig {
            num_samples: 8,
            pos_fraction: 0.25,
            ..RoiConfig::default()
        };
        let props: Vec<BBox> = (0..20)
            .map(|i| BBox::new(i as f64 * 0.05, 0.0, 2.0 + i as f64 * 0.05, 2.0))
            .chain((0..20).map(|i| BBox::new(50.0 + i as f64, 50.0, 52.0 + i as f64, 52.0)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_rois(&[props], &[vec![GT]], &[vec![0]], &cfg, &mut rng);
        assert_eq!(s.len(), 8);
        assert_eq!(s.positive_rows, vec![0, 1]);
        assert_eq!(s.labels.iter().filter(|&&l| l == 1).count(), 2);
        assert_eq!(s.targets.len(), 32);
    }
}
