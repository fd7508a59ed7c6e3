//! Region proposals: decoding the RPN head into ranked boxes, and the
//! anchor labelling and sampling used to train it.

use rand::Rng;

use super::anchors::{generate_anchors, Anchor};
use super::config::RpnConfig;
use super::model::RpnOutput;
use crate::bfp::FeaturePyramid;
use crate::boxes::{decode_deltas, encode_deltas, iou, nms, order_by_score, BBox};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Sigmoid of the objectness logit.
    pub score: f64,
    pub batch: usize,
}

/// Anchors matching the level shapes of `pyramid`.
pub fn pyramid_anchors(g: &Graph, pyramid: &FeaturePyramid, cfg: &RpnConfig) -> Vec<Vec<Anchor>> {
    let levels: Vec<_> = pyramid
        .levels
        .iter()
        .map(|l| {
            let [_, _, h, w] = g.value(l.map).shape();
            (l.index, l.stride, h, w)
        })
        .collect();
    generate_anchors(&levels, &cfg.anchor_scales, &cfg.anchor_ratios)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Reads the four deltas of anchor `idx` (level layout `a·HW + yx`) of
/// image `n` from a `[N, 4A, H, W]` buffer.
fn anchor_deltas(reg: &Tensor, n: usize, idx: usize) -> [f64; 4] {
    let [_, c4, h, w] = reg.shape();
    let hw = h * w;
    let (a, yx) = (idx / hw, idx % hw);
    let base = n * c4 * hw;
    let at = |j: usize| reg.data()[base + (4 * a + j) * hw + yx];
    [at(0), at(1), at(2), at(3)]
}

/// Decoded, clipped and suppressed proposals of image `n`, best first.
#[allow(clippy::too_many_arguments)]
pub fn propose_image(
    g: &Graph,
    rpn: &RpnOutput,
    anchors: &[Vec<Anchor>],
    n: usize,
    img_h: usize,
    img_w: usize,
    cfg: &RpnConfig,
    train: bool,
) -> Vec<Proposal> {
    let (pre_k, post_n) = if train {
        (cfg.pre_nms_top_k_train, cfg.post_nms_top_n_train)
    } else {
        (cfg.pre_nms_top_k_test, cfg.post_nms_top_n_test)
    };
    let mut all = Vec::new();
    for (li, level_anchors) in anchors.iter().enumerate() {
        let cls = g.value(rpn.cls[li]);
        let reg = g.value(rpn.reg[li]);
        let per_image = cls.item_len();
        let logits = &cls.data()[n * per_image..(n + 1) * per_image];
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for &idx in order_by_score(logits).iter().take(pre_k) {
            let b = decode_deltas(&level_anchors[idx].bbox, anchor_deltas(reg, n, idx))
                .clip(img_w as f64, img_h as f64);
            if b.width() >= cfg.min_size && b.height() >= cfg.min_size && b.width() > 0.0 && b.height() > 0.0 {
                boxes.push(b);
                scores.push(sigmoid(logits[idx]));
            }
        }
        for k in nms(&boxes, &scores, cfg.nms_iou) {
            all.push(Proposal {
                bbox: boxes[k],
                score: scores[k],
                batch: n,
            });
        }
    }
    // Stable: equal scores keep level order, then rank order within a level.
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(post_n);
    all
}

/// Sampled anchor labels for one level: flat element indices into the
/// `[N, A, H, W]` logits and `[N, 4A, H, W]` deltas.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTargets {
    pub cls_idx: Vec<usize>,
    pub cls_labels: Vec<f64>,
    pub reg_idx: Vec<usize>,
    pub reg_targets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub levels: Vec<LevelTargets>,
    pub num_samples: usize,
    pub num_positive: usize,
}

/// Anchor labels of one image: `1` positive, `0` negative, `-1` ignored,
/// plus the matched gt index of each positive.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], cfg: &RpnConfig) -> (Vec<i8>, Vec<usize>) {
    let mut labels = vec![-1i8; anchors.len()];
    let mut matched = vec![0usize; anchors.len()];
    if gts.is_empty() {
        labels.iter_mut().for_each(|l| *l = 0);
        return (labels, matched);
    }
    let mut gt_best = vec![f64::NEG_INFINITY; gts.len()];
    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect();
    for (i, row) in overlaps.iter().enumerate() {
        let (mut best_j, mut best) = (0, row[0]);
        for (j, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                best_j = j;
            }
            gt_best[j] = gt_best[j].max(v);
        }
        if best < cfg.neg_iou {
            labels[i] = 0;
        }
        if best >= cfg.pos_iou {
            labels[i] = 1;
            matched[i] = best_j;
        }
    }
    for (j, &best) in gt_best.iter().enumerate() {
        if best < cfg.min_pos_iou {
            continue;
        }
        for (i, row) in overlaps.iter().enumerate() {
            if row[j] == best {
                labels[i] = 1;
                matched[i] = j;
            }
        }
    }
    (labels, matched)
}

/// `amount` indices from `pool`, uniformly without replacement, returned
/// in ascending order.
pub fn sample_subset(pool: &[usize], amount: usize, rng: &mut impl Rng) -> Vec<usize> {
    if amount >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Labels and samples anchors of every image in the batch.
pub fn rpn_targets(
    anchors: &[Vec<Anchor>],
    level_shapes: &[[usize; 4]],
    gts: &[Vec<BBox>],
    cfg: &RpnConfig,
    rng: &mut impl Rng,
) -> RpnTargets {
    let mut levels = vec![LevelTargets::default(); anchors.len()];
    let flat: Vec<(usize, usize)> = anchors
        .iter()
        .enumerate()
        .flat_map(|(l, a)| (0..a.len()).map(move |i| (l, i)))
        .collect();
    let boxes: Vec<BBox> = flat.iter().map(|&(l, i)| anchors[l][i].bbox).collect();
    let (mut num_samples, mut num_positive) = (0, 0);
    for (n, image_gts) in gts.iter().enumerate() {
        let (labels, matched) = label_anchors(&boxes, image_gts, cfg);
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let max_pos = (cfg.num_samples as f64 * cfg.pos_fraction) as usize;
        let pos = sample_subset(&pos, max_pos, rng);
        let neg = sample_subset(&neg, cfg.num_samples - pos.len(), rng);
        num_samples += pos.len() + neg.len();
        num_positive += pos.len();
        for (&i, is_pos) in pos.iter().map(|i| (i, true)).chain(neg.iter().map(|i| (i, false))) {
            let (l, idx) = flat[i];
            let [_, a, h, w] = level_shapes[l];
            let hw = h * w;
            let t = &mut levels[l];
            t.cls_idx.push(n * a * hw + idx);
            t.cls_labels.push(if is_pos { 1.0 } else { 0.0 });
            if is_pos {
                let d = encode_deltas(&anchors[l][idx].bbox, &image_gts[matched[i]]);
                let (ai, yx) = (idx / hw, idx % hw);
                for (j, v) in d.into_iter().enumerate() {
                    t.reg_idx.push((n * 4 * a + 4 * ai + j) * hw + yx);
                    t.reg_targets.push(v);
                }
            }
        }
    }
    RpnTargets {
        levels,
        num_samples,
        num_positive,
    }
}

/// Objectness BCE plus smooth-L1 on positive anchors, both averaged over
/// the sampled anchor count.
pub fn rpn_loss(g: &mut Graph, rpn: &RpnOutput, targets: &RpnTargets, cfg: &RpnConfig) -> Result<Var> {
    let norm = targets.num_samples.max(1) as f64;
    let mut terms = Vec::new();
    for (l, t) in targets.levels.iter().enumerate() {
        if !t.cls_idx.is_empty() {
            terms.push(g.sigmoid_bce(rpn.cls[l], &t.cls_idx, &t.cls_labels, norm)?);
        }
        if !t.reg_idx.is_empty() {
            terms.push(g.smooth_l1(rpn.reg[l], &t.reg_idx, &t.reg_targets, cfg.smooth_l1_beta, norm)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RpnConfig {
        RpnConfig {
            anchor_scales: vec![2.0],
            anchor_ratios: vec![1.0],
            ..RpnConfig::default()
        }
    }

    /// RPN outputs for a single 4×4 level of stride 8 (32×32 image).
    fn outputs(g: &mut Graph, logits: Vec<f64>) -> (RpnOutput, Vec<Vec<Anchor>>) {
        let cls = g.constant(Tensor::new([1, 1, 4, 4], logits).unwrap());
        let reg = g.constant(Tensor::zeros([1, 4, 4, 4]));
        let anchors = generate_anchors(&[(3, 8, 4, 4)], &[2.0], &[1.0]);
        (
            RpnOutput {
                cls: vec![cls],
                reg: vec![reg],
            },
            anchors,
        )
    }

    #[test]
    fn zero_logits_rank_by_index_and_respect_top_n() {
        let mut g = Graph::new();
        let (rpn, anchors) = outputs(&mut g, vec![0.0; 16]);
        let c = RpnConfig {
            post_nms_top_n_test: 3,
            nms_iou: 1.0,
            ..cfg()
        };
        let props = propose_image(&g, &rpn, &anchors, 0, 32, 32, &c, false);
        assert_eq!(props.len(), 3);
        let want: Vec<BBox> = anchors[0][..3].iter().map(|a| a.bbox.clip(32.0, 32.0)).collect();
        assert_eq!(props.iter().map(|p| p.bbox).collect::<Vec<_>>(), want);
        assert!(props.iter().all(|p| p.score == 0.5));
    }

    #[test]
    fn planted_logit_ranks_first_and_boxes_are_clipped() {
        let mut g = Graph::new();
        let mut logits = vec![-1.0; 16];
        logits[9] = 5.0;
        let (rpn, anchors) = outputs(&mut g, logits);
        let props = propose_image(&g, &rpn, &anchors, 0, 32, 32, &cfg(), false);
        assert_eq!(props[0].bbox, anchors[0][9].bbox);
        for p in &props {
            assert!(p.bbox.x1 >= 0.0 && p.bbox.y1 >= 0.0 && p.bbox.x2 <= 32.0 && p.bbox.y2 <= 32.0);
        }
    }

    #[test]
    fn labels_follow_thresholds_and_best_anchor_rule() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let anchors = [
            gt,                              // IoU 1 -> positive
            BBox::new(50.0, 50.0, 60.0, 60.0), // IoU 0 -> negative
            BBox::new(0.0, 0.0, 10.0, 20.0),   // IoU 0.5 -> ignored
        ];
        let (labels, matched) = label_anchors(&anchors, &[gt], &cfg());
        assert_eq!(labels, vec![1, 0, -1]);
        assert_eq!(matched[0], 0);

        // Only a weak anchor exists: it becomes positive by the best-anchor rule.
        let weak = [BBox::new(0.0, 0.0, 10.0, 25.0), BBox::new(80.0, 0.0, 90.0, 10.0)];
        let (labels, _) = label_anchors(&weak, &[gt], &cfg());
        assert_eq!(labels, vec![1, 0]);

        let (labels, _) = label_anchors(&anchors, &[], &cfg());
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn sampling_respects_budget_and_fraction() {
        let anchors = generate_anchors(&[(2, 4, 8, 8)], &[2.0], &[1.0]);
        let gts = vec![vec![BBox::new(0.0, 0.0, 8.0, 8.0), BBox::new(16.0, 16.0, 24.0, 24.0)]];
        let c = RpnConfig {
            num_samples: 16,
            pos_fraction: 0.25,
            ..cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rpn_targets(&anchors, &[[1, 1, 8, 8]], &gts, &c, &mut rng);
        assert_eq!(t.num_samples, 16);
        assert!(t.num_positive >= 2 && t.num_positive <= 4);
        assert_eq!(t.levels[0].reg_idx.len(), 4 * t.num_positive);
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(t, rpn_targets(&anchors, &[[1, 1, 8, 8]], &gts, &c, &mut rng2));
    }
}
