//! Brute-force reference for [`super::average_precision`]. Every prefix of
//! the ranked list is re-matched from scratch and the interpolated precision
//! is read off the explicit PR point set. Quadratic and slow; meant only for
//! checking the fast path on small instances.

use super::{Detection, GroundTruth};

fn overlap(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

fn true_positives(ranked: &[&Detection], gts: &[GroundTruth], thr: f64) -> usize {
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for d in ranked {
        let db: [f64; 4] = d.bbox.into();
        let mut pick = None;
        let mut pick_iou = f64::NEG_INFINITY;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let v = overlap(&db, &g.bbox.into());
            if v >= thr && v > pick_iou {
                pick = Some(j);
                pick_iou = v;
            }
        }
        if let Some(j) = pick {
            taken[j] = true;
            tp += 1;
        }
    }
    tp
}

/// `None` when `gts` is empty.
pub fn brute_force_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = true_positives(&ranked[..k], gts, thr) as f64;
            (tp / gts.len() as f64, tp / k as f64)
        })
        .collect();

    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();

    let mut ap = 0.0;
    let mut last = 0.0;
    for r in levels {
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        ap += (r - last) * best;
        last = r;
    }
    Some(ap)
}
