use std::cell::Cell;

use super::kernels::{self, ConvGeometry, Windows};
use super::{ensure_same_shape, numel, Tensor};
use crate::error::{Error, Result};
use crate::fom::Roi;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation identifiers, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Linear,
    ChannelAffine,
    Relu,
    Add,
    Scale,
    MulConst,
    MaxPool,
    ResizeBilinear,
    ConcatChannels,
    Affinity,
    SoftmaxRows,
    Aggregate,
    RoiSample,
    SoftmaxCrossEntropy,
    SigmoidBce,
    SmoothL1,
    WeightedSum,
    Sum,
    ConcatRows,
    GatherRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::ChannelAffine => "channel_affine",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::MulConst => "mul_const",
            OpKind::MaxPool => "max_pool",
            OpKind::ResizeBilinear => "resize_bilinear",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Affinity => "nonlocal_affinity",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Aggregate => "nonlocal_aggregate",
            OpKind::RoiSample => "roi_sample",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::SigmoidBce => "sigmoid_bce",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::Sum => "sum",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherRows => "gather_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        const ALL: [OpKind; 22] = [
            OpKind::Leaf,
            OpKind::Conv2d,
            OpKind::Linear,
            OpKind::ChannelAffine,
            OpKind::Relu,
            OpKind::Add,
            OpKind::Scale,
            OpKind::MulConst,
            OpKind::MaxPool,
            OpKind::ResizeBilinear,
            OpKind::ConcatChannels,
            OpKind::Affinity,
            OpKind::SoftmaxRows,
            OpKind::Aggregate,
            OpKind::RoiSample,
            OpKind::SoftmaxCrossEntropy,
            OpKind::SigmoidBce,
            OpKind::SmoothL1,
            OpKind::WeightedSum,
            OpKind::Sum,
            OpKind::ConcatRows,
            OpKind::GatherRows,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Scales every gradient produced by the backward pass of `kind` on the
/// current thread by 1.05. Test fixture for the verification battery; pass
/// `None` to restore exact gradients.
pub fn inject_backward_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeometry,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    ChannelAffine {
        x: usize,
        scale: usize,
        shift: usize,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    MulConst {
        x: usize,
        factors: Vec<f64>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    ResizeBilinear {
        x: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    Affinity {
        theta: usize,
        phi: usize,
    },
    SoftmaxRows {
        x: usize,
    },
    Aggregate {
        attn: usize,
        g: usize,
    },
    RoiSample {
        feature: usize,
        offsets: Option<usize>,
        rois: Vec<Roi>,
        k: usize,
        sampling: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        rows: Vec<usize>,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: usize,
        idx: Vec<usize>,
        labels: Vec<f64>,
        normalizer: f64,
    },
    SmoothL1 {
        pred: usize,
        idx: Vec<usize>,
        targets: Vec<f64>,
        beta: f64,
        normalizer: f64,
    },
    WeightedSum {
        x: usize,
        weights: Vec<f64>,
    },
    Sum {
        inputs: Vec<usize>,
    },
    ConcatRows {
        inputs: Vec<usize>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::Relu { .. } => OpKind::Relu,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::ResizeBilinear { .. } => OpKind::ResizeBilinear,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::Affinity { .. } => OpKind::Affinity,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::Aggregate { .. } => OpKind::Aggregate,
            Op::RoiSample { .. } => OpKind::RoiSample,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::SigmoidBce { .. } => OpKind::SigmoidBce,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Sum { .. } => OpKind::Sum,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
        }
    }
}

/// A recorded operation: its output, the inputs it read, and whatever it
/// saved for the backward pass.
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Ops append nodes; [`Graph::backward`] walks them in
/// reverse and accumulates gradients into every node that requires one.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let geom = ConvGeometry::new(xt, wt, bt.len(), stride, pad)?;
        let out = kernels::conv2d_forward(&geom, xt, wt.data(), bt.data());
        let rg = self.any_grad(&[x.0, w.0, b.0]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
            },
            rg,
        ))
    }

    /// `x` viewed as `N×D` times `w` (`[D, M, 1, 1]`) plus `b` (`M` values).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = (xt.n(), xt.item_len());
        let [wd, m, wh, ww] = wt.shape();
        if wd != d || wh != 1 || ww != 1 {
            return Err(Error::shape(
                "linear",
                format!("input has {} features, weight is {:?}", d, wt.shape()),
            ));
        }
        if bt.len() != m {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries for {} outputs", bt.len(), m),
            ));
        }
        let mut out = Tensor::zeros([n, m, 1, 1]);
        for row in out.data_mut().chunks_mut(m) {
            row.copy_from_slice(bt.data());
        }
        kernels::gemm(n, d, m, xt.data(), false, wt.data(), false, out.data_mut(), 1.0);
        let rg = self.any_grad(&[x.0, w.0, b.0]);
        Ok(self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Per-channel `x·scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.c();
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::shape("channel_affine", "scale/shift length must equal channels"));
        }
        let plane = xt.h() * xt.w();
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let mut out = xt.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk.iter_mut() {
                *v = *v * s[ch] + t[ch];
            }
        }
        let rg = self.any_grad(&[x.0, scale.0, shift.0]);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::Relu { x: x.0 }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        ensure_same_shape("add", at, bt)?;
        let mut out = at.clone();
        for (o, v) in out.data_mut().iter_mut().zip(bt.data()) {
            *o += v;
        }
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::Scale { x: x.0, factor }, rg)
    }

    /// Element-wise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if factors.len() != xt.len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} factors for {} elements", factors.len(), xt.len()),
            ));
        }
        let mut out = xt.clone();
        for (o, f) in out.data_mut().iter_mut().zip(&factors) {
            *o *= f;
        }
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(out, Op::MulConst { x: x.0, factors }, rg))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::invalid("max_pool", "k and stride must be >= 1"));
        }
        let xt = self.value(x);
        if k > xt.h() || k > xt.w() {
            return Err(Error::invalid(
                "max_pool",
                format!("window {} larger than input {}x{}", k, xt.h(), xt.w()),
            ));
        }
        let ys = kernels::fixed_windows(xt.h(), k, stride);
        let xs = kernels::fixed_windows(xt.w(), k, stride);
        Ok(self.pool_windows(x, &ys, &xs))
    }

    /// Max over `out_h×out_w` adaptive bins (start `⌊i·H/out⌋`, end
    /// `⌈(i+1)·H/out⌉`); equal to [`Graph::max_pool`] for exact ratios.
    pub fn adaptive_max_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xt = self.value(x);
        if out_h == 0 || out_w == 0 || out_h > xt.h() || out_w > xt.w() {
            return Err(Error::invalid(
                "adaptive_max_pool",
                format!("cannot pool {}x{} to {}x{}", xt.h(), xt.w(), out_h, out_w),
            ));
        }
        let ys = kernels::adaptive_windows(xt.h(), out_h);
        let xs = kernels::adaptive_windows(xt.w(), out_w);
        Ok(self.pool_windows(x, &ys, &xs))
    }

    fn pool_windows(&mut self, x: Var, ys: &Windows, xs: &Windows) -> Var {
        let (out, argmax) = kernels::max_pool_forward(self.value(x), ys, xs);
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::MaxPool { x: x.0, argmax }, rg)
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize_bilinear", "target extent must be >= 1"));
        }
        let xt = self.value(x);
        if xt.h() == 0 || xt.w() == 0 {
            return Err(Error::invalid("resize_bilinear", "empty input"));
        }
        let out = kernels::resize_bilinear_forward(xt, out_h, out_w);
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(out, Op::ResizeBilinear { x: x.0 }, rg))
    }

    /// Resizes to `(h, w)`: bilinear when growing, adaptive max-pool when
    /// shrinking, identity when equal.
    pub fn resize_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xt = self.value(x);
        let (xh, xw) = (xt.h(), xt.w());
        if (xh, xw) == (h, w) {
            Ok(x)
        } else if xh >= h && xw >= w {
            self.adaptive_max_pool(x, h, w)
        } else if xh <= h && xw <= w {
            self.resize_bilinear(x, h, w)
        } else {
            Err(Error::shape(
                "resize_to",
                format!("mixed up/down resize {}x{} -> {}x{}", xh, xw, h, w),
            ))
        }
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let [n, ca, h, w] = at.shape();
        let [nb, cb, hb, wb] = bt.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", at.shape(), bt.shape()),
            ));
        }
        let mut data = Vec::with_capacity(numel([n, ca + cb, h, w]));
        for i in 0..n {
            data.extend_from_slice(&at.data()[i * at.item_len()..(i + 1) * at.item_len()]);
            data.extend_from_slice(&bt.data()[i * bt.item_len()..(i + 1) * bt.item_len()]);
        }
        let out = Tensor::new([n, ca + cb, h, w], data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, Op::ConcatChannels { a: a.0, b: b.0 }, rg))
    }

    /// Pairwise dot-product affinity between spatial positions:
    /// `out[n, 0, i, j] = Σ_c θ[n, c, i]·φ[n, c, j]`.
    pub fn affinity(&mut self, theta: Var, phi: Var) -> Result<Var> {
        let (tt, pt) = (self.value(theta), self.value(phi));
        ensure_same_shape("nonlocal_affinity", tt, pt)?;
        let [n, c, h, w] = tt.shape();
        let p = h * w;
        let mut out = Tensor::zeros([n, 1, p, p]);
        for i in 0..n {
            let th = &tt.data()[i * c * p..(i + 1) * c * p];
            let ph = &pt.data()[i * c * p..(i + 1) * c * p];
            kernels::gemm(p, c, p, th, true, ph, false, &mut out.data_mut()[i * p * p..(i + 1) * p * p], 0.0);
        }
        let rg = self.any_grad(&[theta.0, phi.0]);
        Ok(self.push(
            out,
            Op::Affinity {
                theta: theta.0,
                phi: phi.0,
            },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out = Tensor::new(xt.shape(), kernels::softmax_rows(xt.data(), xt.w())).expect("same shape");
        let rg = self.any_grad(&[x.0]);
        self.push(out, Op::SoftmaxRows { x: x.0 }, rg)
    }

    /// Attention-weighted sum over positions:
    /// `out[n, c, i] = Σ_j attn[n, 0, i, j]·g[n, c, j]`.
    pub fn aggregate(&mut self, attn: Var, g: Var) -> Result<Var> {
        let (at, gt) = (self.value(attn), self.value(g));
        let [n, c, h, w] = gt.shape();
        let p = h * w;
        if at.shape() != [n, 1, p, p] {
            return Err(Error::shape(
                "nonlocal_aggregate",
                format!("attention {:?} for values {:?}", at.shape(), gt.shape()),
            ));
        }
        let mut out = Tensor::zeros([n, c, h, w]);
        for i in 0..n {
            let gv = &gt.data()[i * c * p..(i + 1) * c * p];
            let a = &at.data()[i * p * p..(i + 1) * p * p];
            kernels::gemm(c, p, p, gv, false, a, true, &mut out.data_mut()[i * c * p..(i + 1) * c * p], 0.0);
        }
        let rg = self.any_grad(&[attn.0, g.0]);
        Ok(self.push(out, Op::Aggregate { attn: attn.0, g: g.0 }, rg))
    }

    /// Bilinear RoI sampling on a `k×k` bin grid with `sampling²` points per
    /// bin, optionally translating each bin by a learned offset
    /// (`[R, 2·k·k, 1, 1]`, `(dx, dy)` per bin in feature pixels).
    pub fn roi_sample(
        &mut self,
        feature: Var,
        offsets: Option<Var>,
        rois: &[Roi],
        k: usize,
        sampling: usize,
    ) -> Result<Var> {
        if k == 0 || sampling == 0 {
            return Err(Error::invalid("roi_sample", "k and sampling must be >= 1"));
        }
        let ft = self.value(feature);
        for roi in rois {
            if roi.batch >= ft.n() {
                return Err(Error::invalid(
                    "roi_sample",
                    format!("roi batch index {} with {} feature maps", roi.batch, ft.n()),
                ));
            }
            roi.validate()?;
        }
        if let Some(o) = offsets {
            let want = [rois.len(), 2 * k * k, 1, 1];
            if self.value(o).shape() != want {
                return Err(Error::shape(
                    "deformable_roi_pool",
                    format!("offsets {:?}, expected {:?}", self.value(o).shape(), want),
                ));
            }
        }
        let out = kernels::roi_sample_forward(
            ft,
            rois,
            offsets.map(|o| self.value(o).data()),
            k,
            sampling,
        );
        let mut inputs = vec![feature.0];
        inputs.extend(offsets.map(|o| o.0));
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            out,
            Op::RoiSample {
                feature: feature.0,
                offsets: offsets.map(|o| o.0),
                rois: rois.to_vec(),
                k,
                sampling,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of
    /// `logits` (`N×M`), over all rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = (0..self.value(logits).n()).collect();
        self.softmax_cross_entropy_rows(logits, &rows, labels)
    }

    /// As [`Graph::softmax_cross_entropy`] restricted to `rows`; an empty row
    /// set yields a zero loss.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (n, m) = (lt.n(), lt.item_len());
        if rows.len() != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} rows but {} labels", rows.len(), labels.len()),
            ));
        }
        for (&r, &y) in rows.iter().zip(labels) {
            if r >= n {
                return Err(Error::invalid("softmax_cross_entropy", format!("row {} of {}", r, n)));
            }
            if y >= m {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("label {} outside [0, {})", y, m),
                ));
            }
        }
        let probs = kernels::softmax_rows(lt.data(), m);
        let mut loss = 0.0;
        for (&r, &y) in rows.iter().zip(labels) {
            let row = &lt.data()[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        if !rows.is_empty() {
            loss /= rows.len() as f64;
        }
        let rg = self.any_grad(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                rows: rows.to_vec(),
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Binary cross-entropy with logits summed over the flat elements `idx`
    /// and divided by `normalizer`.
    pub fn sigmoid_bce(&mut self, logits: Var, idx: &[usize], labels: &[f64], normalizer: f64) -> Result<Var> {
        let lt = self.value(logits);
        if idx.len() != labels.len() || idx.iter().any(|&i| i >= lt.len()) {
            return Err(Error::shape("sigmoid_bce", "index/label mismatch"));
        }
        if normalizer <= 0.0 {
            return Err(Error::invalid("sigmoid_bce", "normalizer must be positive"));
        }
        let mut loss = 0.0;
        for (&i, &y) in idx.iter().zip(labels) {
            let z = lt.data()[i];
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        loss /= normalizer;
        let rg = self.any_grad(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits: logits.0,
                idx: idx.to_vec(),
                labels: labels.to_vec(),
                normalizer,
            },
            rg,
        ))
    }

    /// `Σ smooth_l1(pred[idx] − target) / normalizer`.
    pub fn smooth_l1(&mut self, pred: Var, idx: &[usize], targets: &[f64], beta: f64, normalizer: f64) -> Result<Var> {
        let pt = self.value(pred);
        if idx.len() != targets.len() || idx.iter().any(|&i| i >= pt.len()) {
            return Err(Error::shape("smooth_l1", "index/target mismatch"));
        }
        if beta <= 0.0 || normalizer <= 0.0 {
            return Err(Error::invalid("smooth_l1", "beta and normalizer must be positive"));
        }
        let mut loss = 0.0;
        for (&i, &t) in idx.iter().zip(targets) {
            loss += smooth_l1(pt.data()[i] - t, beta);
        }
        loss /= normalizer;
        let rg = self.any_grad(&[pred.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred: pred.0,
                idx: idx.to_vec(),
                targets: targets.to_vec(),
                beta,
                normalizer,
            },
            rg,
        ))
    }

    /// Scalar readout `Σ weights[i]·x[i]`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if weights.len() != xt.len() {
            return Err(Error::shape("weighted_sum", "weights length differs from input"));
        }
        let s = xt.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x: x.0, weights }, rg))
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for v in inputs {
            let t = self.value(*v);
            if t.len() != 1 {
                return Err(Error::shape("sum", "inputs must be scalars"));
            }
            s += t.data()[0];
        }
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&idx);
        Ok(self.push(Tensor::scalar(s), Op::Sum { inputs: idx }, rg))
    }

    /// Stacks tensors with equal `(C, H, W)` along the batch axis.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let [_, c, h, w] = self.value(*first).shape();
        let mut n = 0;
        let mut data = Vec::new();
        for v in inputs {
            let t = self.value(*v);
            if t.shape()[1..] != [c, h, w] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs [_, {}, {}, {}]", t.shape(), c, h, w),
                ));
            }
            n += t.n();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new([n, c, h, w], data)?;
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.any_grad(&idx);
        Ok(self.push(out, Op::ConcatRows { inputs: idx }, rg))
    }

    /// `out[r] = x[rows[r]]` along the batch axis; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape();
        let row_len = xt.item_len();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= n {
                return Err(Error::invalid("gather_rows", format!("row {} of {}", r, n)));
            }
            data.extend_from_slice(&xt.data()[r * row_len..(r + 1) * row_len]);
        }
        let out = Tensor::new([rows.len(), c, h, w], data)?;
        let rg = self.any_grad(&[x.0]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node. Gradients accumulate on every node
    /// that requires one and can be read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let fault = FAULT.with(|f| f.get());
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let mut contribs = backward_node(before, node, &gy);
            if fault == Some(node.op.kind()) {
                for (_, g) in contribs.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= 1.05;
                    }
                }
            }
            for (j, g) in contribs {
                let target = &mut before[j];
                if !target.requires_grad {
                    continue;
                }
                let acc = target.value.grad_mut();
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            self.nodes[i].value.grad = Some(gy);
        }
        Ok(())
    }
}

#[inline]
fn smooth_l1(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Gradient contributions `(input index, dL/dinput)` of one node.
fn backward_node(before: &[Node], node: &Node, gy: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let needs = |i: usize| before[i].requires_grad;
    let zeros = |i: usize| vec![0.0; before[i].value.len()];
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom } => {
            let xt = &before[*x].value;
            let wt = &before[*w].value;
            let mut dx = needs(*x).then(|| zeros(*x));
            let mut dw = needs(*w).then(|| zeros(*w));
            let mut db = needs(*b).then(|| zeros(*b));
            kernels::conv2d_backward(
                geom,
                xt,
                wt.data(),
                gy,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            out.extend(dx.map(|g| (*x, g)));
            out.extend(dw.map(|g| (*w, g)));
            out.extend(db.map(|g| (*b, g)));
        }
        Op::Linear { x, w, b } => {
            let xt = &before[*x].value;
            let wt = &before[*w].value;
            let (n, d) = (xt.n(), xt.item_len());
            let m = wt.c();
            if needs(*x) {
                let mut dx = zeros(*x);
                kernels::gemm(n, m, d, gy, false, wt.data(), true, &mut dx, 0.0);
                out.push((*x, dx));
            }
            if needs(*w) {
                let mut dw = zeros(*w);
                kernels::gemm(d, n, m, xt.data(), true, gy, false, &mut dw, 0.0);
                out.push((*w, dw));
            }
            if needs(*b) {
                let mut db = vec![0.0; m];
                for row in gy.chunks(m) {
                    for (a, v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                out.push((*b, db));
            }
        }
        Op::ChannelAffine { x, scale, shift } => {
            let xt = &before[*x].value;
            let c = xt.c();
            let plane = xt.h() * xt.w();
            let s = before[*scale].value.data();
            let mut dx = vec![0.0; xt.len()];
            let mut ds = vec![0.0; c];
            let mut dt = vec![0.0; c];
            for (i, (gchunk, xchunk)) in gy.chunks(plane).zip(xt.data().chunks(plane)).enumerate() {
                let ch = i % c;
                for ((d, &g), &xv) in dx[i * plane..(i + 1) * plane].iter_mut().zip(gchunk).zip(xchunk) {
                    *d = g * s[ch];
                    ds[ch] += g * xv;
                    dt[ch] += g;
                }
            }
            out.push((*x, dx));
            out.push((*scale, ds));
            out.push((*shift, dt));
        }
        Op::Relu { x } => {
            let xt = &before[*x].value;
            let dx = gy
                .iter()
                .zip(xt.data())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            out.push((*x, dx));
        }
        Op::Add { a, b } => {
            out.push((*a, gy.to_vec()));
            out.push((*b, gy.to_vec()));
        }
        Op::Scale { x, factor } => {
            out.push((*x, gy.iter().map(|g| g * factor).collect()));
        }
        Op::MulConst { x, factors } => {
            out.push((*x, gy.iter().zip(factors).map(|(g, f)| g * f).collect()));
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = zeros(*x);
            for (&g, &src) in gy.iter().zip(argmax) {
                dx[src] += g;
            }
            out.push((*x, dx));
        }
        Op::ResizeBilinear { x } => {
            let xt = &before[*x].value;
            let mut dx = zeros(*x);
            kernels::resize_bilinear_backward(xt.shape(), gy, node.value.h(), node.value.w(), &mut dx);
            out.push((*x, dx));
        }
        Op::ConcatChannels { a, b } => {
            let (la, lb) = (before[*a].value.item_len(), before[*b].value.item_len());
            let mut da = Vec::with_capacity(before[*a].value.len());
            let mut db = Vec::with_capacity(before[*b].value.len());
            for chunk in gy.chunks(la + lb) {
                da.extend_from_slice(&chunk[..la]);
                db.extend_from_slice(&chunk[la..]);
            }
            out.push((*a, da));
            out.push((*b, db));
        }
        Op::Affinity { theta, phi } => {
            let tt = &before[*theta].value;
            let pt = &before[*phi].value;
            let [n, c, h, w] = tt.shape();
            let p = h * w;
            let mut dth = zeros(*theta);
            let mut dph = zeros(*phi);
            for i in 0..n {
                let ga = &gy[i * p * p..(i + 1) * p * p];
                let th = &tt.data()[i * c * p..(i + 1) * c * p];
                let ph = &pt.data()[i * c * p..(i + 1) * c * p];
                kernels::gemm(c, p, p, ph, false, ga, true, &mut dth[i * c * p..(i + 1) * c * p], 0.0);
                kernels::gemm(c, p, p, th, false, ga, false, &mut dph[i * c * p..(i + 1) * c * p], 0.0);
            }
            out.push((*theta, dth));
            out.push((*phi, dph));
        }
        Op::SoftmaxRows { x } => {
            let y = node.value.data();
            let cols = node.value.w();
            let mut dx = vec![0.0; y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(gy.chunks(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            out.push((*x, dx));
        }
        Op::Aggregate { attn, g } => {
            let at = &before[*attn].value;
            let gt = &before[*g].value;
            let [n, c, h, w] = gt.shape();
            let p = h * w;
            let mut da = zeros(*attn);
            let mut dg = zeros(*g);
            for i in 0..n {
                let dy = &gy[i * c * p..(i + 1) * c * p];
                let gv = &gt.data()[i * c * p..(i + 1) * c * p];
                let a = &at.data()[i * p * p..(i + 1) * p * p];
                kernels::gemm(p, c, p, dy, true, gv, false, &mut da[i * p * p..(i + 1) * p * p], 0.0);
                kernels::gemm(c, p, p, dy, false, a, false, &mut dg[i * c * p..(i + 1) * c * p], 0.0);
            }
            out.push((*attn, da));
            out.push((*g, dg));
        }
        Op::RoiSample {
            feature,
            offsets,
            rois,
            k,
            sampling,
        } => {
            let ft = &before[*feature].value;
            let off = offsets.map(|o| before[o].value.data());
            let mut df = needs(*feature).then(|| zeros(*feature));
            let mut doff = offsets.filter(|&o| needs(o)).map(zeros);
            kernels::roi_sample_backward(ft, rois, off, *k, *sampling, gy, df.as_deref_mut(), doff.as_deref_mut());
            out.extend(df.map(|g| (*feature, g)));
            if let (Some(o), Some(g)) = (offsets, doff) {
                out.push((*o, g));
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            rows,
            labels,
            probs,
        } => {
            let m = before[*logits].value.item_len();
            let mut dl = zeros(*logits);
            if !rows.is_empty() {
                let scale = gy[0] / rows.len() as f64;
                for (&r, &y) in rows.iter().zip(labels) {
                    for j in 0..m {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        dl[r * m + j] += scale * (probs[r * m + j] - ind);
                    }
                }
            }
            out.push((*logits, dl));
        }
        Op::SigmoidBce {
            logits,
            idx,
            labels,
            normalizer,
        } => {
            let lt = &before[*logits].value;
            let mut dl = zeros(*logits);
            let scale = gy[0] / normalizer;
            for (&i, &y) in idx.iter().zip(labels) {
                let z = lt.data()[i];
                let s = 1.0 / (1.0 + (-z).exp());
                dl[i] += scale * (s - y);
            }
            out.push((*logits, dl));
        }
        Op::SmoothL1 {
            pred,
            idx,
            targets,
            beta,
            normalizer,
        } => {
            let pt = &before[*pred].value;
            let mut dp = zeros(*pred);
            let scale = gy[0] / normalizer;
            for (&i, &t) in idx.iter().zip(targets) {
                dp[i] += scale * smooth_l1_grad(pt.data()[i] - t, *beta);
            }
            out.push((*pred, dp));
        }
        Op::WeightedSum { x, weights } => {
            out.push((*x, weights.iter().map(|w| w * gy[0]).collect()));
        }
        Op::Sum { inputs } => {
            for &i in inputs {
                out.push((i, vec![gy[0]]));
            }
        }
        Op::ConcatRows { inputs } => {
            let mut start = 0;
            for &i in inputs {
                let len = before[i].value.len();
                out.push((i, gy[start..start + len].to_vec()));
                start += len;
            }
        }
        Op::GatherRows { x, rows } => {
            let row_len = before[*x].value.item_len();
            let mut dx = zeros(*x);
            for (r, &src) in rows.iter().enumerate() {
                let dst = &mut dx[src * row_len..(src + 1) * row_len];
                for (d, g) in dst.iter_mut().zip(&gy[r * row_len..(r + 1) * row_len]) {
                    *d += g;
                }
            }
            out.push((*x, dx));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_product() {
        let mut g = Graph::new();
        let x = g.param(t([1, 1, 1, 1], &[2.0]));
        let w = g.param(t([1, 1, 1, 1], &[3.0]));
        let b = g.param(Tensor::vector(vec![0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv_identity_weight() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let x = g.constant(t([1, 1, 3, 4], &data));
        let w = g.param(t([1, 1, 1, 1], &[1.0]));
        let b = g.param(Tensor::vector(vec![0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_all_ones_three_by_three() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full([1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::vector(vec![0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), [1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_output_extent_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 11, 8]));
        let w = g.param(Tensor::zeros([4, 3, 3, 3]));
        let b = g.param(Tensor::vector(vec![0.0; 4]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), [2, 4, (11 + 2 - 3) / 2 + 1, (8 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.param(Tensor::zeros([1, 3, 3, 3]));
        let b = g.param(Tensor::vector(vec![0.0]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn resize_constant_and_identity() {
        let mut g = Graph::new();
        let c = g.constant(t([1, 1, 1, 1], &[5.0]));
        let up = g.resize_bilinear(c, 4, 4).unwrap();
        assert!(g.value(up).data().iter().all(|&v| v == 5.0));

        let x = g.constant(t([1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let same = g.resize_bilinear(x, 2, 2).unwrap();
        assert_eq!(g.value(same).data(), &[0.0, 1.0, 2.0, 3.0]);
        assert!(g.resize_bilinear(x, 0, 2).is_err());
    }

    #[test]
    fn max_pool_cases() {
        let mut g = Graph::new();
        let x = g.param(t([1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.max_pool(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        let id = g.max_pool(x, 1, 1).unwrap();
        assert_eq!(g.value(id).data(), g.value(x).data());
        assert!(g.max_pool(x, 3, 1).is_err());
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full([1, 1, 2, 2], 7.0));
        let y = g.max_pool(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_cases() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 2, 1, 1], &[1.0, 2.0]));
        let w = g.param(t([2, 1, 1, 1], &[1.0, 1.0]));
        let b = g.param(Tensor::vector(vec![0.5]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);

        let x = g.constant(t([2, 3, 1, 1], &[1.0, -2.0, 0.5, 4.0, 0.0, -1.0]));
        let eye = g.param(Tensor::from_fn([3, 3, 1, 1], |[i, j, _, _]| (i == j) as u8 as f64));
        let zb = g.param(Tensor::vector(vec![0.0; 3]));
        let y = g.linear(x, eye, zb).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let zw = g.param(Tensor::zeros([3, 2, 1, 1]));
        let bias = g.param(Tensor::vector(vec![1.5, -2.0]));
        let y = g.linear(x, zw, bias).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 1.5, -2.0]);

        let bad = g.param(Tensor::zeros([4, 2, 1, 1]));
        assert!(g.linear(x, bad, bias).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let uniform = g.param(Tensor::zeros([1, 4, 1, 1]));
        let l = g.softmax_cross_entropy(uniform, &[2]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-15);

        let peaked = g.param(t([1, 3, 1, 1], &[0.0, 60.0, 0.0]));
        let l = g.softmax_cross_entropy(peaked, &[1]).unwrap();
        assert!(g.scalar(l) < 1e-20);

        let two = g.param(t([2, 3, 1, 1], &[0.3, -1.0, 2.0, 1.0, 0.0, -0.5]));
        let both = g.softmax_cross_entropy(two, &[0, 2]).unwrap();
        let a = g.softmax_cross_entropy_rows(two, &[0], &[0]).unwrap();
        let b = g.softmax_cross_entropy_rows(two, &[1], &[2]).unwrap();
        assert!((g.scalar(both) - (g.scalar(a) + g.scalar(b)) / 2.0).abs() < 1e-15);

        assert!(g.softmax_cross_entropy(two, &[0, 3]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 7], |[_, _, h, w]| (h * 7 + w) as f64 * 1.7 - 9.0));
        let y = g.softmax_rows(x);
        for row in g.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_skips_constants() {
        let mut g = Graph::new();
        let x = g.constant(t([1, 1, 1, 2], &[1.0, 2.0]));
        let y = g.param(t([1, 1, 1, 2], &[3.0, 4.0]));
        let s = g.add(x, y).unwrap();
        let r = g.weighted_sum(s, vec![1.0, 1.0]).unwrap();
        g.backward(r).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(y).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for name in ["conv2d", "deformable_roi_pool", "roi_sample", "linear"] {
            if let Some(k) = OpKind::from_name(name) {
                assert_eq!(k.name(), name);
            }
        }
        assert_eq!(OpKind::from_name("roi_sample"), Some(OpKind::RoiSample));
    }
}
