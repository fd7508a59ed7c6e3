//! Parameter layout and the differentiable forward passes: backbone + FPN,
//! optional balanced-pyramid refinement, RPN head and the decoupled RoI
//! heads.

use super::config::DetectorConfig;
use super::params::{init_tensor, Bound, Init, ParamStore};
use crate::bfp::{self, FeaturePyramid, Level, NonLocalParams};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::fom::{self, FomParams, MergeMode, Roi};
use crate::layers::{Conv, Dense};
use crate::tensor::{Graph, Tensor, Var};

pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

pub fn num_anchor_shapes(cfg: &DetectorConfig) -> usize {
    cfg.rpn.anchor_scales.len() * cfg.rpn.anchor_ratios.len()
}

struct Builder {
    store: ParamStore,
    seed: u64,
}

impl Builder {
    fn add(&mut self, name: String, shape: [usize; 4], init: Init) {
        let t = init_tensor(&name, shape, init, self.seed);
        self.store.insert(name, t);
    }

    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, init: Init) {
        self.add(format!("{name}.weight"), [out_c, in_c, k, k], init);
        self.add(format!("{name}.bias"), [1, out_c, 1, 1], Init::Zeros);
    }

    fn affine(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.scale"), [1, c, 1, 1], Init::Ones);
        self.add(format!("{name}.shift"), [1, c, 1, 1], Init::Zeros);
    }

    fn dense(&mut self, name: &str, d: usize, m: usize, init: Init) {
        self.add(format!("{name}.weight"), [d, m, 1, 1], init);
        self.add(format!("{name}.bias"), [1, m, 1, 1], Init::Zeros);
    }
}

/// Every parameter of the configured model, initialized from `seed`.
/// Each tensor draws from its own stream keyed by name, so adding or
/// removing a module leaves the other initial values untouched.
pub fn build_params(cfg: &DetectorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        seed,
    };
    let ch = cfg.backbone_channels;
    let f = cfg.fpn_width;
    b.conv("backbone.stem", ch[0], 3, 3, Init::HeConv);
    b.affine("backbone.stem", ch[0]);
    for i in 0..4 {
        let name = format!("backbone.stage{}", i + 1);
        b.conv(&name, ch[i + 1], ch[i], 3, Init::HeConv);
        b.affine(&name, ch[i + 1]);
    }
    for (i, l) in LEVELS.iter().enumerate() {
        b.conv(&format!("fpn.lateral{l}"), f, ch[i + 1], 1, Init::HeConv);
        b.conv(&format!("fpn.output{l}"), f, f, 3, Init::HeConv);
    }
    if cfg.bfp_enabled {
        let inner = (f / 2).max(1);
        b.conv("bfp.theta", inner, f, 1, Init::HeConv);
        b.conv("bfp.phi", inner, f, 1, Init::HeConv);
        b.conv("bfp.g", inner, f, 1, Init::HeConv);
        b.conv("bfp.out", f, inner, 1, Init::Zeros);
    }
    let a = num_anchor_shapes(cfg);
    b.conv("rpn.conv", f, f, 3, Init::Normal(0.01));
    b.conv("rpn.cls", a, f, 1, Init::Normal(0.01));
    b.conv("rpn.reg", 4 * a, f, 1, Init::Normal(0.01));

    let k = cfg.fom.k;
    let d = f * k * k;
    let h = cfg.roi.hidden;
    let m = cfg.num_classes + 1;
    b.dense("head.cls.fc1", d, h, Init::HeLinear);
    b.dense("head.cls.fc2", h, h, Init::HeLinear);
    b.dense("head.cls.logits", h, m, Init::Normal(0.01));
    b.dense("head.reg.fc1", d, h, Init::HeLinear);
    b.dense("head.reg.fc2", h, h, Init::HeLinear);
    b.dense("head.reg.deltas", h, 4, Init::Normal(0.001));
    if cfg.fom_enabled {
        b.dense("fom.offset", d, 2 * k * k, Init::Zeros);
        b.dense("fom.aux", d, m, Init::Normal(0.01));
        if cfg.fom.merge == MergeMode::ConcatProject {
            b.conv("fom.merge", f, 2 * f, 1, Init::HeConv);
        }
    }
    Ok(b.store)
}

fn conv(p: &Bound, name: &str) -> Conv {
    Conv {
        weight: p.var(&format!("{name}.weight")),
        bias: p.var(&format!("{name}.bias")),
    }
}

fn dense(p: &Bound, name: &str) -> Dense {
    Dense {
        weight: p.var(&format!("{name}.weight")),
        bias: p.var(&format!("{name}.bias")),
    }
}

fn conv_affine_relu(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(p, name).apply(g, x, stride, 1)?;
    let y = g.channel_affine(y, p.var(&format!("{name}.scale")), p.var(&format!("{name}.shift")))?;
    Ok(g.relu(y))
}

/// Stride-2 stem, four conv/pool stages and a top-down FPN; levels 2..=5 at
/// strides 4..=32, all `fpn_width` channels wide.
pub fn backbone_fpn(g: &mut Graph, p: &Bound, image: Var) -> Result<FeaturePyramid> {
    let [_, c, h, w] = g.value(image).shape();
    if c != 3 {
        return Err(Error::shape("backbone_fpn", format!("expected 3 channels, got {}", c)));
    }
    if h < 32 || w < 32 {
        return Err(Error::invalid(
            "backbone_fpn",
            format!("{}x{} image is too small for a stride-32 pyramid", h, w),
        ));
    }
    let mut x = conv_affine_relu(g, p, "backbone.stem", image, 2)?;
    let mut stages = Vec::with_capacity(4);
    for i in 1..=4 {
        x = conv_affine_relu(g, p, &format!("backbone.stage{i}"), x, 1)?;
        x = g.max_pool(x, 2, 2)?;
        stages.push(x);
    }
    let mut laterals = Vec::with_capacity(4);
    for (s, l) in stages.iter().zip(LEVELS) {
        laterals.push(conv(p, &format!("fpn.lateral{l}")).apply(g, *s, 1, 0)?);
    }
    for i in (0..3).rev() {
        let [_, _, lh, lw] = g.value(laterals[i]).shape();
        let up = g.resize_to(laterals[i + 1], lh, lw)?;
        laterals[i] = g.add(laterals[i], up)?;
    }
    let mut levels = Vec::with_capacity(4);
    for (lat, l) in laterals.into_iter().zip(LEVELS) {
        let map = conv(p, &format!("fpn.output{l}")).apply(g, lat, 1, 1)?;
        levels.push(Level {
            index: l,
            stride: 1 << l,
            map,
        });
    }
    Ok(FeaturePyramid::new(levels))
}

pub fn nonlocal_params(p: &Bound) -> NonLocalParams {
    NonLocalParams {
        theta: conv(p, "bfp.theta"),
        phi: conv(p, "bfp.phi"),
        g: conv(p, "bfp.g"),
        out: conv(p, "bfp.out"),
    }
}

/// Backbone + FPN followed by the balanced-pyramid refinement when enabled.
pub fn features(g: &mut Graph, p: &Bound, cfg: &DetectorConfig, image: Var) -> Result<FeaturePyramid> {
    let pyramid = backbone_fpn(g, p, image)?;
    if cfg.bfp_enabled {
        bfp::forward(g, &pyramid, &nonlocal_params(p))
    } else {
        Ok(pyramid)
    }
}

/// Per-level objectness logits `[N, A, H, W]` and deltas `[N, 4A, H, W]`.
pub struct RpnOutput {
    pub cls: Vec<Var>,
    pub reg: Vec<Var>,
}

pub fn rpn_head(g: &mut Graph, p: &Bound, pyramid: &FeaturePyramid) -> Result<RpnOutput> {
    let (shared, cls_head, reg_head) = (conv(p, "rpn.conv"), conv(p, "rpn.cls"), conv(p, "rpn.reg"));
    let mut out = RpnOutput {
        cls: Vec::new(),
        reg: Vec::new(),
    };
    for level in &pyramid.levels {
        let t = shared.apply(g, level.map, 1, 1)?;
        let t = g.relu(t);
        out.cls.push(cls_head.apply(g, t, 1, 0)?);
        out.reg.push(reg_head.apply(g, t, 1, 0)?);
    }
    Ok(out)
}

/// A box in input-image pixels attached to an image of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageRoi {
    pub batch: usize,
    pub bbox: BBox,
}

/// Pyramid level for a RoI: one level up per doubling of `sqrt(area)`
/// beyond `2·finest_scale`.
pub fn roi_level(b: &BBox, finest_scale: f64) -> usize {
    let scale = b.area().sqrt();
    let l = (scale / finest_scale + 1e-6).log2().floor();
    2 + l.clamp(0.0, 3.0) as usize
}

/// RoI in the coordinates of a map with the given stride, kept inside the
/// map so that pooling never sees a box entirely off the edge.
fn feature_roi(r: &ImageRoi, stride: usize, h: usize, w: usize) -> Roi {
    let s = stride as f64;
    let (fw, fh) = (w as f64, h as f64);
    let x1 = (r.bbox.x1 / s).min(fw - 0.5);
    let y1 = (r.bbox.y1 / s).min(fh - 0.5);
    Roi {
        batch: r.batch,
        x1,
        y1,
        x2: (r.bbox.x2 / s).max(x1 + 1e-3),
        y2: (r.bbox.y2 / s).max(y1 + 1e-3),
    }
}

pub struct DetectorOutput {
    /// `[R, M+1]`, background in column 0.
    pub cls_logits: Var,
    /// `[R, 4]`, class-agnostic, in units of the target stds.
    pub deltas: Var,
    /// `[R, M+1]` from the deformed features alone; `None` without FOM.
    pub fom_logits: Option<Var>,
    /// Classification-branch input features `[R, C, k, k]`.
    pub cls_features: Var,
}

fn stack_in_order(g: &mut Graph, parts: &[Var], inverse: &[usize], identity: bool) -> Result<Var> {
    let cat = if parts.len() == 1 { parts[0] } else { g.concat_rows(parts)? };
    if identity {
        Ok(cat)
    } else {
        g.gather_rows(cat, inverse)
    }
}

/// Decoupled heads. Output rows follow `rois` one to one.
pub fn forward_heads(
    g: &mut Graph,
    p: &Bound,
    cfg: &DetectorConfig,
    pyramid: &FeaturePyramid,
    rois: &[ImageRoi],
) -> Result<DetectorOutput> {
    if rois.is_empty() {
        return Err(Error::invalid("forward_heads", "no proposals"));
    }
    let (k, sampling) = (cfg.fom.k, cfg.fom.sampling);
    let fom_params = cfg.fom_enabled.then(|| FomParams {
        offset_fc: dense(p, "fom.offset"),
        merge_proj: (cfg.fom.merge == MergeMode::ConcatProject).then(|| conv(p, "fom.merge")),
    });

    let assigned: Vec<usize> = rois.iter().map(|r| roi_level(&r.bbox, cfg.roi.finest_scale)).collect();
    let mut concat_order = Vec::with_capacity(rois.len());
    let (mut pooled_parts, mut cls_parts, mut aux_parts) = (Vec::new(), Vec::new(), Vec::new());
    for level in &pyramid.levels {
        let members: Vec<usize> = (0..rois.len()).filter(|&i| assigned[i] == level.index).collect();
        if members.is_empty() {
            continue;
        }
        let [_, _, h, w] = g.value(level.map).shape();
        let level_rois: Vec<Roi> = members.iter().map(|&i| feature_roi(&rois[i], level.stride, h, w)).collect();
        let pooled = fom::roi_pool(g, level.map, &level_rois, k, sampling)?;
        pooled_parts.push(pooled);
        match &fom_params {
            Some(fp) => {
                let out = fom::forward_from_pooled(g, level.map, pooled, &level_rois, &cfg.fom, fp)?;
                cls_parts.push(out.merged);
                aux_parts.push(out.deformed);
            }
            None => cls_parts.push(pooled),
        }
        concat_order.extend(members);
    }
    let mut inverse = vec![0; rois.len()];
    for (pos, &i) in concat_order.iter().enumerate() {
        inverse[i] = pos;
    }
    let identity = inverse.iter().enumerate().all(|(i, &j)| i == j);
    let pooled = stack_in_order(g, &pooled_parts, &inverse, identity)?;
    let cls_features = stack_in_order(g, &cls_parts, &inverse, identity)?;

    let mut x = dense(p, "head.cls.fc1").apply(g, cls_features)?;
    x = g.relu(x);
    x = dense(p, "head.cls.fc2").apply(g, x)?;
    x = g.relu(x);
    let cls_logits = dense(p, "head.cls.logits").apply(g, x)?;

    let mut r = dense(p, "head.reg.fc1").apply(g, pooled)?;
    r = g.relu(r);
    r = dense(p, "head.reg.fc2").apply(g, r)?;
    r = g.relu(r);
    let deltas = dense(p, "head.reg.deltas").apply(g, r)?;

    let fom_logits = if fom_params.is_some() {
        let deformed = stack_in_order(g, &aux_parts, &inverse, identity)?;
        Some(dense(p, "fom.aux").apply(g, deformed)?)
    } else {
        None
    };
    Ok(DetectorOutput {
        cls_logits,
        deltas,
        fom_logits,
        cls_features,
    })
}

/// Stacks `[1, 3, H, W]` images into one `[N, 3, H, W]` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("stack_images", "empty batch"))?;
    let [_, c, h, w] = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for t in images {
        if t.shape() != [1, c, h, w] {
            return Err(Error::shape(
                "stack_images",
                format!("{:?} vs [1, {}, {}, {}]", t.shape(), c, h, w),
            ));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new([images.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::config::Ablation;

    fn small_cfg() -> DetectorConfig {
        let mut cfg = DetectorConfig::toy(3);
        cfg.backbone_channels = [4, 4, 4, 6, 8];
        cfg.fpn_width = 4;
        cfg.roi.hidden = 8;
        cfg.fom.k = 3;
        cfg
    }

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 7 + y * 3 + x) % 11) as f64 / 11.0 - 0.5)
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let cfg = small_cfg();
        let params = build_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image(64, 64));
        let pyr = backbone_fpn(&mut g, &p, x).unwrap();
        let shapes: Vec<_> = pyr.shapes(&g).iter().map(|s| (s[2], s[3])).collect();
        assert_eq!(shapes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert!(pyr.shapes(&g).iter().all(|s| s[1] == 4));
    }

    #[test]
    fn tiny_images_rejected() {
        let cfg = small_cfg();
        let params = build_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image(16, 64));
        assert!(backbone_fpn(&mut g, &p, x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let run = || {
            let params = build_params(&cfg, 5).unwrap();
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let x = g.constant(image(64, 64));
            let pyr = features(&mut g, &p, &cfg, x).unwrap();
            pyr.levels.iter().map(|l| g.value(l.map).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ablation_changes_only_module_params() {
        let full = build_params(&small_cfg(), 1).unwrap();
        let base = build_params(&small_cfg().with_ablation(Ablation::Baseline), 1).unwrap();
        assert!(base.names().iter().all(|n| !n.starts_with("fom.") && !n.starts_with("bfp.")));
        for (name, t) in base.iter() {
            assert_eq!(full.get(name), Some(t), "{name}");
        }
        assert!(full.contains("fom.offset.weight") && full.contains("bfp.theta.weight"));
    }

    #[test]
    fn roi_level_mapping() {
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 32.0, 32.0), 56.0), 2);
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 112.0, 112.0), 56.0), 3);
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 224.0, 224.0), 56.0), 4);
        assert_eq!(roi_level(&BBox::new(0.0, 0.0, 2000.0, 2000.0), 56.0), 5);
    }

    #[test]
    fn head_shapes_and_row_alignment() {
        let mut cfg = small_cfg();
        cfg.roi.finest_scale = 8.0;
        let params = build_params(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image(64, 64));
        let pyr = features(&mut g, &p, &cfg, x).unwrap();
        let boxes = [
            BBox::new(0.0, 0.0, 40.0, 40.0),
            BBox::new(4.0, 4.0, 12.0, 12.0),
            BBox::new(10.0, 20.0, 30.0, 34.0),
        ];
        let rois: Vec<ImageRoi> = boxes.iter().map(|&bbox| ImageRoi { batch: 0, bbox }).collect();
        let out = forward_heads(&mut g, &p, &cfg, &pyr, &rois).unwrap();
        assert_eq!(g.value(out.cls_logits).shape(), [3, 4, 1, 1]);
        assert_eq!(g.value(out.deltas).shape(), [3, 4, 1, 1]);
        assert_eq!(g.value(out.fom_logits.unwrap()).shape(), [3, 4, 1, 1]);

        // Each row must equal the single-RoI forward of that RoI.
        for (i, roi) in rois.iter().enumerate() {
            let single = forward_heads(&mut g, &p, &cfg, &pyr, std::slice::from_ref(roi)).unwrap();
            let want = g.value(single.cls_logits).data().to_vec();
            let got = &g.value(out.cls_logits).data()[i * 4..(i + 1) * 4];
            assert_eq!(got, &want[..]);
        }
    }

    #[test]
    fn zero_offsets_give_doubled_pooled_features() {
        let cfg = small_cfg();
        let params = build_params(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image(64, 64));
        let pyr = features(&mut g, &p, &cfg, x).unwrap();
        let rois = [ImageRoi {
            batch: 0,
            bbox: BBox::new(5.0, 7.0, 29.0, 25.0),
        }];
        let out = forward_heads(&mut g, &p, &cfg, &pyr, &rois).unwrap();
        let level = &pyr.levels[0];
        let [_, _, h, w] = g.value(level.map).shape();
        let plain = fom::roi_pool(&mut g, level.map, &[feature_roi(&rois[0], 4, h, w)], cfg.fom.k, cfg.fom.sampling).unwrap();
        let doubled: Vec<f64> = g.value(plain).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(out.cls_features).data(), &doubled[..]);
    }
}
