//! Balanced feature pyramid: every level is resized to a reference level and
//! averaged into one balanced map, a non-local block refines that map, and
//! the refinement is added back onto every level.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Level {
    /// Pyramid level `l`; the map has stride `2^l`.
    pub index: usize,
    pub stride: usize,
    pub map: Var,
}

/// Ordered levels, finest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Level>) -> Self {
        Self { levels }
    }

    pub fn level(&self, index: usize) -> Option<&Level> {
        self.levels.iter().find(|l| l.index == index)
    }

    /// Common channel count, or an error if levels disagree.
    pub fn channels(&self, g: &Graph) -> Result<usize> {
        let first = self
            .levels
            .first()
            .ok_or_else(|| Error::invalid("feature_pyramid", "empty pyramid"))?;
        let c = g.value(first.map).c();
        if self.levels.iter().any(|l| g.value(l.map).c() != c) {
            return Err(Error::shape("feature_pyramid", "levels differ in channel count"));
        }
        Ok(c)
    }

    pub fn shapes(&self, g: &Graph) -> Vec<[usize; 4]> {
        self.levels.iter().map(|l| g.value(l.map).shape()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BalancedMap {
    pub b_mix: Var,
    pub reference_level: usize,
}

pub const REFERENCE_LEVEL: usize = 4;

/// `B_mix = (1/L)·Σ_l resize(B_l)` at the reference level's resolution.
pub fn integrate(g: &mut Graph, pyramid: &FeaturePyramid, reference_level: usize) -> Result<BalancedMap> {
    if pyramid.levels.is_empty() {
        return Err(Error::invalid("integrate", "empty pyramid"));
    }
    pyramid.channels(g)?;
    let reference = pyramid.level(reference_level).ok_or_else(|| {
        Error::invalid(
            "integrate",
            format!("reference level {} not in pyramid", reference_level),
        )
    })?;
    let [_, _, h, w] = g.value(reference.map).shape();
    let mut acc: Option<Var> = None;
    for level in &pyramid.levels {
        let resized = g.resize_to(level.map, h, w)?;
        acc = Some(match acc {
            None => resized,
            Some(a) => g.add(a, resized)?,
        });
    }
    let sum = acc.expect("non-empty pyramid");
    let b_mix = g.scale(sum, 1.0 / pyramid.levels.len() as f64);
    Ok(BalancedMap {
        b_mix,
        reference_level,
    })
}

/// 1×1 projections of the non-local block: `theta`, `phi` and `g` to the
/// inner width, `out` back to the map width.
#[derive(Clone, Copy, Debug)]
pub struct NonLocalParams {
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub out: Conv,
}

/// `Y_i = Σ_j softmax_j(θ(x_i)·φ(x_j))·g(x_j)`, projected back to the map
/// width.
pub fn refine_nonlocal(g: &mut Graph, balanced: &BalancedMap, params: &NonLocalParams) -> Result<Var> {
    let x = balanced.b_mix;
    if g.value(x).is_empty() {
        return Err(Error::invalid("refine_nonlocal", "empty balanced map"));
    }
    let theta = params.theta.apply(g, x, 1, 0)?;
    let phi = params.phi.apply(g, x, 1, 0)?;
    let values = params.g.apply(g, x, 1, 0)?;
    let affinity = g.affinity(theta, phi)?;
    let attention = g.softmax_rows(affinity);
    let aggregated = g.aggregate(attention, values)?;
    params.out.apply(g, aggregated, 1, 0)
}

/// Adds `y`, resized to each level, onto that level.
pub fn rescatter(g: &mut Graph, pyramid: &FeaturePyramid, y: Var) -> Result<FeaturePyramid> {
    let c = pyramid.channels(g)?;
    if g.value(y).c() != c {
        return Err(Error::shape(
            "rescatter",
            format!("refinement has {} channels, pyramid {}", g.value(y).c(), c),
        ));
    }
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    for level in &pyramid.levels {
        let [_, _, h, w] = g.value(level.map).shape();
        let resized = g.resize_to(y, h, w)?;
        let map = g.add(level.map, resized)?;
        levels.push(Level { map, ..*level });
    }
    Ok(FeaturePyramid { levels })
}

/// `integrate → refine_nonlocal → rescatter`.
pub fn forward(g: &mut Graph, pyramid: &FeaturePyramid, params: &NonLocalParams) -> Result<FeaturePyramid> {
    let balanced = integrate(g, pyramid, REFERENCE_LEVEL)?;
    let y = refine_nonlocal(g, &balanced, params)?;
    rescatter(g, pyramid, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pyramid_of(g: &mut Graph, maps: Vec<Tensor>) -> FeaturePyramid {
        let levels = maps
            .into_iter()
            .enumerate()
            .map(|(i, t)| Level {
                index: i + 2,
                stride: 1 << (i + 2),
                map: g.param(t),
            })
            .collect();
        FeaturePyramid::new(levels)
    }

    fn conv(g: &mut Graph, out_c: usize, in_c: usize, f: impl Fn(usize, usize) -> f64) -> Conv {
        Conv {
            weight: g.param(Tensor::from_fn([out_c, in_c, 1, 1], |[o, i, _, _]| f(o, i))),
            bias: g.param(Tensor::vector(vec![0.0; out_c])),
        }
    }

    fn eye(o: usize, i: usize) -> f64 {
        (o == i) as u8 as f64
    }

    #[test]
    fn constant_levels_average() {
        let mut g = Graph::new();
        let p = pyramid_of(
            &mut g,
            vec![
                Tensor::full([1, 2, 16, 16], 1.0),
                Tensor::full([1, 2, 8, 8], 2.0),
                Tensor::full([1, 2, 4, 4], 3.0),
                Tensor::full([1, 2, 2, 2], 4.0),
            ],
        );
        let b = integrate(&mut g, &p, 4).unwrap();
        assert_eq!(g.value(b.b_mix).shape(), [1, 2, 4, 4]);
        assert!(g.value(b.b_mix).data().iter().all(|&v| (v - 2.5).abs() <= 1e-12));
    }

    #[test]
    fn single_level_is_identity() {
        let mut g = Graph::new();
        let t = Tensor::from_fn([1, 3, 4, 4], |[_, c, h, w]| (c * 16 + h * 4 + w) as f64);
        let levels = vec![Level {
            index: 4,
            stride: 16,
            map: g.param(t.clone()),
        }];
        let b = integrate(&mut g, &FeaturePyramid::new(levels), 4).unwrap();
        assert_eq!(g.value(b.b_mix).data(), t.data());
    }

    #[test]
    fn empty_pyramid_and_missing_reference_rejected() {
        let mut g = Graph::new();
        assert!(integrate(&mut g, &FeaturePyramid::new(vec![]), 4).is_err());
        let p = pyramid_of(&mut g, vec![Tensor::zeros([1, 1, 4, 4])]);
        assert!(integrate(&mut g, &p, 4).is_err());
    }

    #[test]
    fn uniform_affinity_gives_spatial_mean() {
        let mut g = Graph::new();
        let x = Tensor::from_fn([1, 2, 3, 3], |[_, c, h, w]| (c as f64 + 1.0) * (h * 3 + w) as f64);
        let b = BalancedMap {
            b_mix: g.param(x.clone()),
            reference_level: 4,
        };
        let params = NonLocalParams {
            theta: conv(&mut g, 1, 2, |_, _| 0.0),
            phi: conv(&mut g, 1, 2, |_, _| 0.0),
            g: conv(&mut g, 2, 2, eye),
            out: conv(&mut g, 2, 2, eye),
        };
        let y = refine_nonlocal(&mut g, &b, &params).unwrap();
        for c in 0..2 {
            let mean: f64 = x.data()[c * 9..(c + 1) * 9].iter().sum::<f64>() / 9.0;
            for v in &g.value(y).data()[c * 9..(c + 1) * 9] {
                assert!((v - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_position_reduces_to_value_transform() {
        let mut g = Graph::new();
        let b = BalancedMap {
            b_mix: g.param(Tensor::new([1, 2, 1, 1], vec![0.3, -1.2]).unwrap()),
            reference_level: 4,
        };
        let params = NonLocalParams {
            theta: conv(&mut g, 1, 2, |_, i| 0.5 + i as f64),
            phi: conv(&mut g, 1, 2, |_, i| -0.25 * i as f64),
            g: conv(&mut g, 2, 2, |o, i| (o * 2 + i) as f64 - 1.0),
            out: conv(&mut g, 2, 2, eye),
        };
        let y = refine_nonlocal(&mut g, &b, &params).unwrap();
        // g(x) = [-1·0.3 + 0·(-1.2), 1·0.3 + 2·(-1.2)]
        let want = [-0.3, 0.3 - 2.4];
        for (v, w) in g.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_map_with_zero_value_projection_is_zero() {
        let mut g = Graph::new();
        let b = BalancedMap {
            b_mix: g.param(Tensor::zeros([1, 4, 3, 2])),
            reference_level: 4,
        };
        let params = NonLocalParams {
            theta: conv(&mut g, 2, 4, |o, i| (o + i) as f64 * 0.01),
            phi: conv(&mut g, 2, 4, |o, i| (o as f64 - i as f64) * 0.01),
            g: conv(&mut g, 2, 4, |_, _| 0.0),
            out: conv(&mut g, 4, 2, |o, i| (o * i) as f64),
        };
        let y = refine_nonlocal(&mut g, &b, &params).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rescatter_zero_and_constant() {
        let mut g = Graph::new();
        let maps = vec![
            Tensor::full([1, 2, 8, 8], 0.5),
            Tensor::full([1, 2, 4, 4], 0.5),
            Tensor::full([1, 2, 2, 2], 0.5),
            Tensor::full([1, 2, 1, 1], 0.5),
        ];
        let p = pyramid_of(&mut g, maps.clone());
        let zero = g.constant(Tensor::zeros([1, 2, 2, 2]));
        let same = rescatter(&mut g, &p, zero).unwrap();
        for (l, t) in same.levels.iter().zip(&maps) {
            assert_eq!(g.value(l.map).data(), t.data());
        }
        let c = g.constant(Tensor::full([1, 2, 2, 2], 1.75));
        let out = rescatter(&mut g, &p, c).unwrap();
        assert_eq!(out.shapes(&g), p.shapes(&g));
        for l in &out.levels {
            assert!(g.value(l.map).data().iter().all(|&v| v == 2.25));
        }
    }
}
