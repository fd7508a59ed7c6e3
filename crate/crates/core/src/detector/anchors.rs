use crate::boxes::BBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    /// Pyramid level (2 = stride 4).
    pub level: usize,
}

/// Anchor shapes `(w, h)` for one stride, ordered scale-major.
pub fn anchor_shapes(stride: usize, scales: &[f64], ratios: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(scales.len() * ratios.len());
    for &s in scales {
        for &r in ratios {
            let side = s * stride as f64;
            out.push((side / r.sqrt(), side * r.sqrt()));
        }
    }
    out
}

/// Anchors of one level in the layout of the RPN head outputs: index
/// `a·H·W + y·W + x` for anchor shape `a` at cell `(y, x)`.
pub fn level_anchors(level: usize, stride: usize, h: usize, w: usize, scales: &[f64], ratios: &[f64]) -> Vec<Anchor> {
    let shapes = anchor_shapes(stride, scales, ratios);
    let mut out = Vec::with_capacity(shapes.len() * h * w);
    let s = stride as f64;
    for &(aw, ah) in &shapes {
        for y in 0..h {
            for x in 0..w {
                out.push(Anchor {
                    bbox: BBox::from_center((x as f64 + 0.5) * s, (y as f64 + 0.5) * s, aw, ah),
                    level,
                });
            }
        }
    }
    out
}

/// One anchor list per level. `levels` holds `(level, stride, h, w)`.
pub fn generate_anchors(levels: &[(usize, usize, usize, usize)], scales: &[f64], ratios: &[f64]) -> Vec<Vec<Anchor>> {
    levels
        .iter()
        .map(|&(l, s, h, w)| level_anchors(l, s, h, w, scales, ratios))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_single_shape() {
        let a = level_anchors(2, 4, 2, 2, &[2.0], &[1.0]);
        let centers: Vec<(f64, f64)> = a.iter().map(|a| a.bbox.center()).collect();
        assert_eq!(centers, vec![(2.0, 2.0), (6.0, 2.0), (2.0, 6.0), (6.0, 6.0)]);
        assert!(a.iter().all(|a| a.bbox.width() == 8.0 && a.bbox.height() == 8.0));
    }

    #[test]
    fn ratio_sets_aspect_and_keeps_area() {
        let a = level_anchors(3, 8, 1, 1, &[4.0], &[0.5, 1.0, 2.0]);
        for (anchor, r) in a.iter().zip([0.5, 1.0, 2.0]) {
            assert!((anchor.bbox.height() / anchor.bbox.width() - r).abs() < 1e-12);
            assert!((anchor.bbox.area() - 32.0 * 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn count_matches_enumeration() {
        let levels = [(2, 4, 7, 5), (3, 8, 4, 3), (4, 16, 2, 2), (5, 32, 1, 1)];
        let scales = [4.0, 8.0];
        let ratios = [0.5, 1.0, 2.0];
        let all = generate_anchors(&levels, &scales, &ratios);
        for (lvl, &(l, _, h, w)) in all.iter().zip(&levels) {
            let mut brute = 0;
            for _y in 0..h {
                for _x in 0..w {
                    for _s in &scales {
                        for _r in &ratios {
                            brute += 1;
                        }
                    }
                }
            }
            assert_eq!(lvl.len(), brute);
            assert!(lvl.iter().all(|a| a.level == l && a.bbox.is_valid()));
        }
    }
}
