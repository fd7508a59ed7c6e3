//! Feature offset module: per-bin learned offsets for the classification
//! branch, applied through deformable RoI pooling and merged back with the
//! plainly pooled features.
//!
//! RoI coordinates are continuous feature-map pixels; pixel `i` spans
//! `[i, i+1)` and its value sits at `i + 0.5`. Each of the `k×k` bins is
//! sampled on a `sampling×sampling` sub-grid and averaged. Samples that fall
//! outside the map read zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, Dense};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Roi {
    pub fn new(batch: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let roi = Self { batch, x1, y1, x2, y2 };
        roi.validate()?;
        Ok(roi)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::invalid(
                "roi_pool",
                format!(
                    "degenerate roi ({}, {}, {}, {})",
                    self.x1, self.y1, self.x2, self.y2
                ),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            x2: self.x2 + dx,
            y1: self.y1 + dy,
            y2: self.y2 + dy,
            ..*self
        }
    }

    pub fn intersects(&self, height: usize, width: usize) -> bool {
        self.x2 > 0.0 && self.y2 > 0.0 && self.x1 < width as f64 && self.y1 < height as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// `F + F_c`.
    #[default]
    Sum,
    /// `conv1x1([F; F_c])` back to the input width.
    ConcatProject,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FomConfig {
    pub k: usize,
    pub alpha: f64,
    pub sampling: usize,
    pub merge: MergeMode,
}

impl Default for FomConfig {
    fn default() -> Self {
        Self {
            k: 7,
            alpha: 0.1,
            sampling: 2,
            merge: MergeMode::Sum,
        }
    }
}

/// Normalized and scaled offsets of one RoI, `k·k` `(dx, dy)` pairs each.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetGrid {
    pub normalized: Vec<(f64, f64)>,
    pub scaled: Vec<(f64, f64)>,
    pub alpha: f64,
}

impl OffsetGrid {
    pub fn from_normalized(normalized: Vec<(f64, f64)>, roi: &Roi, alpha: f64) -> Result<Self> {
        if alpha < 0.0 {
            return Err(Error::invalid("scale_offsets", "alpha must be >= 0"));
        }
        let scaled = normalized
            .iter()
            .map(|&(dx, dy)| (alpha * dx * roi.width(), alpha * dy * roi.height()))
            .collect();
        Ok(Self {
            normalized,
            scaled,
            alpha,
        })
    }

    /// Largest deviation between `scaled` and `alpha·normalized·(w, h)`.
    pub fn consistency_error(&self, roi: &Roi) -> f64 {
        self.normalized
            .iter()
            .zip(&self.scaled)
            .map(|(&(nx, ny), &(sx, sy))| {
                let ex = (self.alpha * nx * roi.width() - sx).abs();
                let ey = (self.alpha * ny * roi.height() - sy).abs();
                ex.max(ey)
            })
            .fold(0.0, f64::max)
    }
}

fn check_rois(g: &Graph, feature: Var, rois: &[Roi]) -> Result<()> {
    let f = g.value(feature);
    for roi in rois {
        roi.validate()?;
        if !roi.intersects(f.h(), f.w()) {
            return Err(Error::invalid(
                "roi_pool",
                format!("roi {:?} lies outside the {}x{} feature map", roi, f.h(), f.w()),
            ));
        }
    }
    Ok(())
}

/// Pools each RoI to `[R, C, k, k]`.
pub fn roi_pool(g: &mut Graph, feature: Var, rois: &[Roi], k: usize, sampling: usize) -> Result<Var> {
    check_rois(g, feature, rois)?;
    g.roi_sample(feature, None, rois, k, sampling)
}

/// A fully connected layer from the flattened pooled feature to `2·k·k`
/// normalized offsets.
pub fn predict_offsets(g: &mut Graph, pooled: Var, fc: &Dense) -> Result<Var> {
    let out = fc.apply(g, pooled)?;
    let [r, m, _, _] = g.value(out).shape();
    let k2 = g.value(pooled).h() * g.value(pooled).w();
    if m != 2 * k2 || r != g.value(pooled).n() {
        return Err(Error::shape(
            "predict_offsets",
            format!("offset layer emits {} values per RoI, need {}", m, 2 * k2),
        ));
    }
    Ok(out)
}

/// Per-element factors that turn normalized offsets into feature pixels:
/// `alpha·w` on `dx`, `alpha·h` on `dy`.
pub fn offset_factors(rois: &[Roi], k: usize, alpha: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(rois.len() * 2 * k * k);
    for roi in rois {
        for _ in 0..k * k {
            f.push(alpha * roi.width());
            f.push(alpha * roi.height());
        }
    }
    f
}

pub fn scale_offsets(g: &mut Graph, normalized: Var, rois: &[Roi], alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::invalid("scale_offsets", "alpha must be >= 0"));
    }
    let [r, m, _, _] = g.value(normalized).shape();
    if r != rois.len() || m % 2 != 0 {
        return Err(Error::shape("scale_offsets", "offsets do not match the RoI list"));
    }
    let k2 = m / 2;
    let k = (k2 as f64).sqrt().round() as usize;
    if k * k != k2 {
        return Err(Error::shape("scale_offsets", "offset count is not 2·k·k"));
    }
    g.mul_const(normalized, offset_factors(rois, k, alpha))
}

/// Pools each RoI with every bin's sample points translated by its offset.
pub fn deformable_roi_pool(
    g: &mut Graph,
    feature: Var,
    rois: &[Roi],
    offsets: Var,
    k: usize,
    sampling: usize,
) -> Result<Var> {
    check_rois(g, feature, rois)?;
    g.roi_sample(feature, Some(offsets), rois, k, sampling)
}

pub fn merge_features(g: &mut Graph, pooled: Var, deformed: Var) -> Result<Var> {
    g.add(pooled, deformed)
}

pub fn merge_features_projected(g: &mut Graph, pooled: Var, deformed: Var, proj: &Conv) -> Result<Var> {
    let cat = g.concat_channels(pooled, deformed)?;
    proj.apply(g, cat, 1, 0)
}

/// Handles for the module's parameters inside one graph.
pub struct FomParams {
    pub offset_fc: Dense,
    pub merge_proj: Option<Conv>,
}

/// Output of the offset-learning branch for a batch of RoIs.
pub struct FomOutput {
    pub pooled: Var,
    pub offsets: Var,
    pub deformed: Var,
    pub merged: Var,
}

/// `roi_pool → predict_offsets → scale_offsets → deformable_roi_pool →
/// merge_features`.
pub fn forward(
    g: &mut Graph,
    feature: Var,
    rois: &[Roi],
    cfg: &FomConfig,
    params: &FomParams,
) -> Result<FomOutput> {
    let pooled = roi_pool(g, feature, rois, cfg.k, cfg.sampling)?;
    forward_from_pooled(g, feature, pooled, rois, cfg, params)
}

pub fn forward_from_pooled(
    g: &mut Graph,
    feature: Var,
    pooled: Var,
    rois: &[Roi],
    cfg: &FomConfig,
    params: &FomParams,
) -> Result<FomOutput> {
    let normalized = predict_offsets(g, pooled, &params.offset_fc)?;
    let offsets = scale_offsets(g, normalized, rois, cfg.alpha)?;
    let deformed = deformable_roi_pool(g, feature, rois, offsets, cfg.k, cfg.sampling)?;
    let merged = match (cfg.merge, &params.merge_proj) {
        (MergeMode::Sum, _) => merge_features(g, pooled, deformed)?,
        (MergeMode::ConcatProject, Some(p)) => merge_features_projected(g, pooled, deformed, p)?,
        (MergeMode::ConcatProject, None) => {
            return Err(Error::Config("concat_project merge needs a projection layer".into()))
        }
    };
    Ok(FomOutput {
        pooled,
        offsets,
        deformed,
        merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn feature(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64, c: usize) -> Tensor {
        Tensor::from_fn([1, c, h, w], |[_, ch, y, x]| f(ch, y, x))
    }

    #[test]
    fn degenerate_roi_rejected() {
        assert!(Roi::new(0, 1.0, 1.0, 1.0, 4.0).is_err());
        assert!(Roi::new(0, 1.0, 5.0, 3.0, 4.0).is_err());
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros([1, 1, 4, 4]));
        let bad = Roi {
            batch: 0,
            x1: 2.0,
            y1: 2.0,
            x2: 2.0,
            y2: 3.0,
        };
        assert!(roi_pool(&mut g, f, &[bad], 2, 2).is_err());
    }

    #[test]
    fn constant_feature_pools_to_constant() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full([1, 3, 9, 9], 2.5));
        let rois = [Roi::new(0, 1.3, 0.7, 7.9, 8.2).unwrap()];
        let p = roi_pool(&mut g, f, &rois, 7, 2).unwrap();
        assert_eq!(g.value(p).shape(), [1, 3, 7, 7]);
        assert!(g.value(p).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_block_averages_to_one_and_a_half() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let rois = [Roi::new(0, 0.0, 0.0, 2.0, 2.0).unwrap()];
        let p = roi_pool(&mut g, f, &rois, 1, 2).unwrap();
        assert_eq!(g.value(p).data(), &[1.5]);
    }

    #[test]
    fn shrinking_roi_at_pixel_centre_reads_that_pixel() {
        let mut g = Graph::new();
        let t = feature(5, 5, |_, y, x| (y * 5 + x) as f64 * 0.37 - 2.0, 1);
        let want = t.at(0, 0, 2, 3);
        let f = g.constant(t);
        let d = 1e-9;
        let rois = [Roi::new(0, 3.5 - d, 2.5 - d, 3.5 + d, 2.5 + d).unwrap()];
        let p = roi_pool(&mut g, f, &rois, 3, 2).unwrap();
        for &v in g.value(p).data() {
            assert!((v - want).abs() < 1e-8, "{v} vs {want}");
        }
    }

    #[test]
    fn scale_offsets_arithmetic() {
        let roi = Roi::new(0, 0.0, 0.0, 100.0, 50.0).unwrap();
        let grid = OffsetGrid::from_normalized(vec![(0.5, -0.5)], &roi, 0.1).unwrap();
        assert_eq!(grid.scaled, vec![(5.0, -2.5)]);
        assert_eq!(grid.consistency_error(&roi), 0.0);

        let mut g = Graph::new();
        let n = g.param(Tensor::new([1, 2, 1, 1], vec![0.5, -0.5]).unwrap());
        let s = scale_offsets(&mut g, n, &[roi], 0.1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, -2.5]);
        let z = scale_offsets(&mut g, n, &[roi], 0.0).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let zero = g.param(Tensor::zeros([1, 2, 1, 1]));
        let s0 = scale_offsets(&mut g, zero, &[roi], 0.1).unwrap();
        assert!(g.value(s0).data().iter().all(|&v| v == 0.0));
        assert!(scale_offsets(&mut g, n, &[roi], -1.0).is_err());
    }

    #[test]
    fn zero_offsets_match_plain_pooling() {
        let mut g = Graph::new();
        let f = g.constant(feature(12, 10, |c, y, x| ((c * 31 + y * 7 + x) as f64).sin(), 2));
        let rois = [
            Roi::new(0, 1.2, 0.4, 8.8, 9.9).unwrap(),
            Roi::new(0, -1.0, 3.0, 4.0, 13.0).unwrap(),
        ];
        let plain = roi_pool(&mut g, f, &rois, 3, 2).unwrap();
        let off = g.constant(Tensor::zeros([2, 18, 1, 1]));
        let def = deformable_roi_pool(&mut g, f, &rois, off, 3, 2).unwrap();
        assert_eq!(g.value(plain).data(), g.value(def).data());
    }

    #[test]
    fn ramp_shift_adds_one_per_bin() {
        let mut g = Graph::new();
        let f = g.constant(feature(16, 16, |_, _, x| x as f64, 1));
        let rois = [Roi::new(0, 4.0, 4.0, 10.0, 10.0).unwrap()];
        let k = 3;
        let plain = roi_pool(&mut g, f, &rois, k, 2).unwrap();
        let shift: Vec<f64> = (0..k * k).flat_map(|_| [1.0, 0.0]).collect();
        let off = g.constant(Tensor::new([1, 2 * k * k, 1, 1], shift).unwrap());
        let def = deformable_roi_pool(&mut g, f, &rois, off, k, 2).unwrap();
        for (a, b) in g.value(plain).data().iter().zip(g.value(def).data()) {
            assert!((b - a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_feature_ignores_in_bounds_offsets() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full([1, 1, 20, 20], -1.25));
        let rois = [Roi::new(0, 6.0, 6.0, 12.0, 13.0).unwrap()];
        let off = g.constant(Tensor::from_fn([1, 8, 1, 1], |[_, i, _, _]| (i as f64 - 3.5) * 0.7));
        let def = deformable_roi_pool(&mut g, f, &rois, off, 2, 2).unwrap();
        assert!(g.value(def).data().iter().all(|&v| (v + 1.25).abs() < 1e-12));
    }

    #[test]
    fn merge_cases() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn([2, 2, 2, 2], |[n, c, h, w]| (n + 2 * c + 3 * h + 5 * w) as f64 * 0.1));
        let b = g.param(Tensor::from_fn([2, 2, 2, 2], |[n, c, h, w]| ((n * c + h * w) as f64).cos()));
        let z = g.constant(Tensor::zeros([2, 2, 2, 2]));
        let az = merge_features(&mut g, a, z).unwrap();
        assert_eq!(g.value(az).data(), g.value(a).data());
        let aa = merge_features(&mut g, a, a).unwrap();
        let twice = g.value(a).map(|v| 2.0 * v);
        assert_eq!(g.value(aa).data(), twice.data());
        let ab = merge_features(&mut g, a, b).unwrap();
        let ba = merge_features(&mut g, b, a).unwrap();
        assert_eq!(g.value(ab).data(), g.value(ba).data());
        let small = g.constant(Tensor::zeros([2, 1, 2, 2]));
        assert!(merge_features(&mut g, a, small).is_err());
    }

    #[test]
    fn zero_offset_layer_predicts_zero() {
        let mut g = Graph::new();
        let pooled = g.constant(Tensor::from_fn([3, 2, 2, 2], |[n, c, h, w]| (n + c + h + w) as f64));
        let fc = Dense {
            weight: g.param(Tensor::zeros([8, 8, 1, 1])),
            bias: g.param(Tensor::vector(vec![0.0; 8])),
        };
        let o = predict_offsets(&mut g, pooled, &fc).unwrap();
        assert_eq!(g.value(o).shape(), [3, 8, 1, 1]);
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    }
}
