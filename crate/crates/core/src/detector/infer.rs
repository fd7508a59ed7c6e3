use serde::{Deserialize, Serialize};

use super::config::{DetectorConfig, InferConfig};
use super::model::{features, forward_heads, rpn_head, ImageRoi};
use super::params::ParamStore;
use super::rpn::{propose_image, pyramid_anchors};
use crate::boxes::{decode_deltas, nms, BBox};
use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_rows;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// 0-based class id.
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Detections for one `[1, 3, H, W]` image in input-pixel coordinates,
/// sorted by descending score.
pub fn infer(cfg: &DetectorConfig, params: &ParamStore, image: &Tensor, icfg: &InferConfig) -> Result<Vec<Prediction>> {
    let [n, _, h, w] = image.shape();
    if n != 1 {
        return Err(Error::shape("infer", "expected a single image"));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let pyramid = features(&mut g, &p, cfg, x)?;
    let rpn = rpn_head(&mut g, &p, &pyramid)?;
    let anchors = pyramid_anchors(&g, &pyramid, &cfg.rpn);
    let proposals = propose_image(&g, &rpn, &anchors, 0, h, w, &cfg.rpn, false);
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let rois: Vec<ImageRoi> = proposals.iter().map(|p| ImageRoi { batch: 0, bbox: p.bbox }).collect();
    let out = forward_heads(&mut g, &p, cfg, &pyramid, &rois)?;
    let m = cfg.num_classes + 1;
    let probs = softmax_rows(g.value(out.cls_logits).data(), m);
    let deltas = g.value(out.deltas).data();
    let stds = cfg.roi.target_stds;

    let decoded: Vec<BBox> = rois
        .iter()
        .enumerate()
        .map(|(r, roi)| {
            let d = &deltas[4 * r..4 * r + 4];
            let unscaled = [d[0] * stds[0], d[1] * stds[1], d[2] * stds[2], d[3] * stds[3]];
            decode_deltas(&roi.bbox, unscaled).clip(w as f64, h as f64)
        })
        .collect();

    let mut dets = Vec::new();
    for c in 1..m {
        let (mut boxes, mut scores) = (Vec::new(), Vec::new());
        for (r, b) in decoded.iter().enumerate() {
            let s = probs[r * m + c];
            if s > icfg.score_thr && b.is_valid() {
                boxes.push(*b);
                scores.push(s);
            }
        }
        for k in nms(&boxes, &scores, icfg.nms_iou) {
            dets.push(Prediction {
                class_id: c - 1,
                bbox: boxes[k],
                score: scores[k],
            });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(icfg.max_dets);
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::build_params;

    #[test]
    fn untrained_model_returns_sorted_valid_detections() {
        let mut cfg = DetectorConfig::toy(3);
        cfg.backbone_channels = [4, 4, 4, 4, 4];
        cfg.fpn_width = 4;
        cfg.roi.hidden = 8;
        cfg.fom.k = 3;
        let params = build_params(&cfg, 0).unwrap();
        let image = Tensor::from_fn([1, 3, 64, 96], |[_, c, y, x]| ((c + y * x) % 5) as f64 * 0.2);
        let icfg = InferConfig {
            score_thr: 0.0,
            ..InferConfig::default()
        };
        let dets = infer(&cfg, &params, &image, &icfg).unwrap();
        assert!(!dets.is_empty() && dets.len() <= icfg.max_dets);
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
        for d in &dets {
            assert!(d.bbox.is_valid() && d.bbox.x2 <= 96.0 && d.bbox.y2 <= 64.0 && d.class_id < 3);
        }
    }
}
