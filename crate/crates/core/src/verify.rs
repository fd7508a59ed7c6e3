//! Numerical verification battery: finite-difference gradient checks of
//! every differentiable building block and of the full detector loss, each
//! over several random seeds.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bfp::{self, FeaturePyramid, Level, NonLocalParams};
use crate::boxes::BBox;
use crate::detector::model::{features, forward_heads, rpn_head, ImageRoi};
use crate::detector::params::ParamStore;
use crate::detector::rpn::{propose_image, pyramid_anchors, rpn_loss, rpn_targets, RpnTargets};
use crate::detector::targets::SampledRois;
use crate::detector::{build_params, sample_rois, total_loss, DetectorConfig, RoiConfig, RpnConfig};
use crate::error::Result;
use crate::eval::oracle::brute_force_ap;
use crate::eval::{average_precision, map_suite, Detection, GroundTruth, THRESHOLDS};
use crate::fom::{self, FomConfig, Roi};
use crate::layers::Conv;
use crate::tensor::{central_difference, grad_check, grad_check_at, relative_error, inject_backward_fault, GradCheckReport, Graph, OpKind, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatteryConfig {
    /// Random cases per check.
    pub seeds: u64,
    /// Central-difference step.
    pub eps: f64,
    /// Maximum relative gradient error.
    pub grad_tolerance: f64,
    /// Perturbs the backward pass of one op for the whole run. Only meant
    /// for testing that the battery catches broken gradients.
    pub fault: Option<OpKind>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            eps: 1e-5,
            grad_tolerance: 1e-4,
            fault: None,
        }
    }
}

/// Worst error over the probes of one random case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseResult {
    pub max_error: f64,
    pub probes: usize,
}

impl From<GradCheckReport> for CaseResult {
    fn from(r: GradCheckReport) -> Self {
        Self {
            max_error: r.max_rel_error,
            probes: r.probes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    /// Relative error of analytic against finite-difference gradients.
    Gradient,
    /// Absolute deviation from an exact identity or an oracle.
    Invariant,
}

type CaseFn = fn(u64, f64) -> Result<CaseResult>;

#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub kind: CheckKind,
    /// Tolerance for invariant checks; gradient checks use
    /// [`BatteryConfig::grad_tolerance`].
    pub tolerance: f64,
    run: CaseFn,
}

const fn grad(name: &'static str, run: CaseFn) -> Check {
    Check {
        name,
        kind: CheckKind::Gradient,
        tolerance: f64::NAN,
        run,
    }
}

const fn invariant(name: &'static str, tolerance: f64, run: CaseFn) -> Check {
    Check {
        name,
        kind: CheckKind::Invariant,
        tolerance,
        run,
    }
}

pub const CHECKS: [Check; 14] = [
    grad("conv2d", check_conv2d),
    grad("linear", check_linear),
    grad("softmax_cross_entropy", check_softmax_ce),
    grad("resize_bilinear", check_resize),
    grad("nonlocal_block", check_nonlocal),
    grad("roi_pool", check_roi_pool),
    grad("deformable_roi_pool/features", check_deformable_features),
    grad("deformable_roi_pool/offsets", check_deformable_offsets),
    grad("full_loss", check_full_loss),
    invariant("zero_offset_equivalence", 1e-12, check_zero_offset),
    invariant("bfp_zero_refinement_identity", 0.0, check_bfp_identity),
    invariant("bfp_constant_levels_mean", 1e-12, check_bfp_constant),
    invariant("ap_brute_force_oracle", 1e-9, check_ap_oracle),
    invariant("ap_threshold_ordering", 0.0, check_ap_ordering),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub kind: CheckKind,
    pub tolerance: f64,
    pub seeds: u64,
    pub probes: usize,
    pub max_error: f64,
    pub worst_seed: u64,
    /// Set when a case could not be evaluated at all.
    pub error: Option<String>,
    pub seconds: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryReport {
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<30} {:>5} {:>7} {:>11} {:>9} {:>5} {:>8}  result\n",
            "check", "seeds", "probes", "max error", "tol", "worst", "time (s)"
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<30} {:>5} {:>7} {:>11.3e} {:>9.0e} {:>5} {:>8.2}  {}{}",
                c.name,
                c.seeds,
                c.probes,
                c.max_error,
                c.tolerance,
                c.worst_seed,
                c.seconds,
                if c.passed { "PASS" } else { "FAIL" },
                c.error.as_ref().map(|e| format!(" ({e})")).unwrap_or_default()
            );
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed in {:.1} s",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
            self.seconds
        );
        s
    }
}

/// Runs every check on the current thread.
pub fn run_battery(cfg: &BatteryConfig) -> BatteryReport {
    run_checks(cfg, &CHECKS)
}

pub fn run_checks(cfg: &BatteryConfig, checks: &[Check]) -> BatteryReport {
    let start = Instant::now();
    inject_backward_fault(cfg.fault);
    let checks = checks.iter().map(|c| run_check(c, cfg)).collect();
    inject_backward_fault(None);
    BatteryReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn run_check(check: &Check, cfg: &BatteryConfig) -> CheckOutcome {
    let start = Instant::now();
    let tolerance = match check.kind {
        CheckKind::Gradient => cfg.grad_tolerance,
        CheckKind::Invariant => check.tolerance,
    };
    let mut out = CheckOutcome {
        name: check.name,
        kind: check.kind,
        tolerance,
        seeds: cfg.seeds,
        probes: 0,
        max_error: 0.0,
        worst_seed: 0,
        error: None,
        seconds: 0.0,
        passed: false,
    };
    for seed in 0..cfg.seeds {
        match (check.run)(seed, cfg.eps) {
            Ok(r) => {
                out.probes += r.probes;
                if r.max_error > out.max_error || r.max_error.is_nan() {
                    out.max_error = r.max_error;
                    out.worst_seed = seed;
                }
            }
            Err(e) => {
                out.error = Some(format!("seed {seed}: {e}"));
                out.worst_seed = seed;
                break;
            }
        }
    }
    out.passed = out.error.is_none() && out.max_error <= tolerance;
    out.seconds = start.elapsed().as_secs_f64();
    out
}

fn gc(f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], eps: f64) -> Result<CaseResult> {
    grad_check(f, inputs, eps).map(CaseResult::from)
}

fn gc_at(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
    probes: &[(usize, usize)],
) -> Result<CaseResult> {
    grad_check_at(f, inputs, eps, probes).map(CaseResult::from)
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

fn randn(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random readout weights so that every output element gets a distinct,
/// non-trivial upstream gradient.
fn readout(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n = g.value(x).len();
    let w = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    g.weighted_sum(x, w)
}

fn check_conv2d(seed: u64, eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 1);
    let (stride, pad) = if seed % 2 == 0 { (1, 1) } else { (2, 0) };
    let inputs = [
        randn(&mut rng, [2, 3, 6, 5], 1.0),
        randn(&mut rng, [4, 3, 3, 3], 0.5),
        randn(&mut rng, [1, 4, 1, 1], 0.5),
    ];
    let wr = rng.clone();
    gc(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            readout(g, y, &mut wr.clone())
        },
        &inputs,
        eps,
    )
}

fn check_linear(seed: u64, eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 2);
    let inputs = [
        randn(&mut rng, [3, 2, 2, 2], 1.0),
        randn(&mut rng, [8, 5, 1, 1], 0.5),
        randn(&mut rng, [1, 5, 1, 1], 0.5),
    ];
    let wr = rng.clone();
    gc(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            readout(g, y, &mut wr.clone())
        },
        &inputs,
        eps,
    )
}

fn check_softmax_ce(seed: u64, eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 3);
    let inputs = [randn(&mut rng, [6, 5, 1, 1], 2.0)];
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
    gc(|g, v| g.softmax_cross_entropy(v[0], &labels), &inputs, eps)
}

fn check_resize(seed: u64, eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 4);
    let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
    let (oh, ow) = (rng.gen_range(1..9), rng.gen_range(1..9));
    let inputs = [randn(&mut rng, [1, 2, h, w], 1.0)];
    let wr = rng.clone();
    gc(
        |g, v| {
            let y = g.resize_bilinear(v[0], oh, ow)?;
            readout(g, y, &mut wr.clone())
        },
        &inputs,
        eps,
    )
}

fn check_nonlocal(seed: u64, eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 5);
    let (c, inner) = (4, 2);
    let mut inputs = vec![
        randn(&mut rng, [1, c, 8, 8], 1.0),
        randn(&mut rng, [1, c, 4, 4], 1.0),
        randn(&mut rng, [1, c, 2, 2], 1.0),
        randn(&mut rng, [1, c, 1, 1], 1.0),
    ];
    for (o, i) in [(inner, c), (inner, c), (inner, c), (c, inner)] {
        inputs.push(randn(&mut rng, [o, i, 1, 1], 0.5));
        inputs.push(randn(&mut rng, [1, o, 1, 1], 0.1));
    }
    // The phi bias is not probed: adding one vector to every key shifts each
    // affinity row by a constant, so its true gradient is identically zero
    // and finite differences only see rounding noise.
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 7)
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let wr = rng.clone();
    gc_at(
        |g, v| {
            let pyramid = FeaturePyramid::new(
                (0..4)
                    .map(|i| Level {
                        index: i + 2,
                        stride: 4 << i,
                        map: v[i],
                    })
                    .collect(),
            );
            let conv = |i: usize| Conv {
                weight: v[4 + 2 * i],
                bias: v[5 + 2 * i],
            };
            let params = NonLocalParams {
                theta: conv(0),
                phi: conv(1),
                g: conv(2),
                out: conv(3),
            };
            let refined = bfp::forward(g, &pyramid, &params)?;
            let mut wr = wr.clone();
            let terms = refined
                .levels
                .iter()
                .map(|l| readout(g, l.map, &mut wr))
                .collect::<Result<Vec<_>>>()?;
            g.sum(&terms)
        },
        &inputs,
        eps,
        &probes,
    )
}

fn random_rois(rng: &mut ChaCha8Rng, n: usize, batch: usize, h: usize, w: usize) -> Vec<Roi> {
    (0..n)
        .map(|_| {
            let x1 = rng.gen_range(0.0..w as f64 * 0.6);
            let y1 = rng.gen_range(0.0..h as f64 * 0.6);
            let x2 = rng.gen_range(x1 + 1.0..w as f64);
            let y2 = rng.gen_range(y1 + 1.0..h as f64);
            Roi::new(rng.gen_range(0..batch), x1, y1, x2, y2).expect("valid by construction")
        })
        .collect()
}

const POOL_K: usize = 3;
const POOL_SAMPLING: usize = 2;

fn check_roi_pool(seed: u64, eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 6);
    let inputs = [randn(&mut rng, [2, 3, 7, 8], 1.0)];
    let rois = random_rois(&mut rng, 3, 2, 7, 8);
    let wr = rng.clone();
    gc(
        |g, v| {
            let y = fom::roi_pool(g, v[0], &rois, POOL_K, POOL_SAMPLING)?;
            readout(g, y, &mut wr.clone())
        },
        &inputs,
        eps,
    )
}

fn deformable_case(seed: u64) -> (Vec<Tensor>, Vec<Roi>, ChaCha8Rng) {
    let mut rng = rng_for(seed, 7);
    let feature = randn(&mut rng, [2, 3, 7, 8], 1.0);
    let rois = random_rois(&mut rng, 3, 2, 7, 8);
    let offsets = randn(&mut rng, [3, 2 * POOL_K * POOL_K, 1, 1], 0.7);
    (vec![feature, offsets], rois, rng)
}

fn deformable_check(seed: u64, eps: f64, input: usize) -> Result<CaseResult> {
    let (inputs, rois, wr) = deformable_case(seed);
    let probes: Vec<(usize, usize)> = (0..inputs[input].len()).map(|j| (input, j)).collect();
    gc_at(
        |g, v| {
            let y = fom::deformable_roi_pool(g, v[0], &rois, v[1], POOL_K, POOL_SAMPLING)?;
            readout(g, y, &mut wr.clone())
        },
        &inputs,
        eps,
        &probes,
    )
}

fn check_deformable_features(seed: u64, eps: f64) -> Result<CaseResult> {
    deformable_check(seed, eps, 0)
}

fn check_deformable_offsets(seed: u64, eps: f64) -> Result<CaseResult> {
    deformable_check(seed, eps, 1)
}

/// A detector small enough that a forward pass takes milliseconds.
pub fn tiny_detector_config() -> DetectorConfig {
    DetectorConfig {
        num_classes: 3,
        input_height: 64,
        input_width: 64,
        backbone_channels: [4, 4, 4, 6, 6],
        fpn_width: 4,
        fom: FomConfig {
            k: 2,
            ..FomConfig::default()
        },
        rpn: RpnConfig {
            anchor_scales: vec![4.0],
            num_samples: 32,
            pre_nms_top_k_train: 50,
            post_nms_top_n_train: 20,
            ..RpnConfig::default()
        },
        roi: RoiConfig {
            num_samples: 12,
            hidden: 6,
            ..RoiConfig::default()
        },
        ..DetectorConfig::default()
    }
}

struct LossCase {
    cfg: DetectorConfig,
    params: ParamStore,
    image: Tensor,
    rpn_targets: RpnTargets,
    sampled: SampledRois,
}

/// Random image and boxes; the proposal and sampling decisions are made
/// once at the starting weights and then held fixed, as they are during a
/// real backward pass.
fn loss_case(seed: u64) -> Result<LossCase> {
    let mut rng = rng_for(seed, 8);
    let cfg = tiny_detector_config();
    let mut params = build_params(&cfg, seed)?;
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    // At full scale the attention logits often saturate the softmax, which
    // drives the theta/phi gradients below what a difference can resolve.
    for name in ["bfp.theta.weight", "bfp.phi.weight"] {
        if let Some(t) = params.get_mut(name) {
            for v in t.data_mut() {
                *v *= 0.3;
            }
        }
    }
    let image = randn(&mut rng, [1, 3, 64, 64], 1.0);
    let gts: Vec<BBox> = (0..2)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
            BBox::new(x, y, x + rng.gen_range(10.0..24.0), y + rng.gen_range(10.0..24.0))
        })
        .collect();
    let classes: Vec<usize> = (0..2).map(|_| rng.gen_range(0..cfg.num_classes)).collect();

    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let pyramid = features(&mut g, &p, &cfg, x)?;
    let rpn = rpn_head(&mut g, &p, &pyramid)?;
    let anchors = pyramid_anchors(&g, &pyramid, &cfg.rpn);
    let shapes: Vec<[usize; 4]> = rpn.cls.iter().map(|v| g.value(*v).shape()).collect();
    let rpn_targets = rpn_targets(&anchors, &shapes, &[gts.clone()], &cfg.rpn, &mut rng);
    let proposals: Vec<BBox> = propose_image(&g, &rpn, &anchors, 0, 64, 64, &cfg.rpn, true)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let sampled = sample_rois(&[proposals], &[gts], &[classes], &cfg.roi, &mut rng);
    Ok(LossCase {
        cfg,
        params,
        image,
        rpn_targets,
        sampled,
    })
}

fn loss_graph(g: &mut Graph, case: &LossCase, vars: &[Var]) -> Result<Var> {
    let p = case.params.bind_vars(vars.to_vec())?;
    let x = g.constant(case.image.clone());
    let pyramid = features(g, &p, &case.cfg, x)?;
    let rpn = rpn_head(g, &p, &pyramid)?;
    let l_rpn = rpn_loss(g, &rpn, &case.rpn_targets, &case.cfg.rpn)?;
    let rois: Vec<ImageRoi> = case.sampled.rois.clone();
    let out = forward_heads(g, &p, &case.cfg, &pyramid, &rois)?;
    Ok(total_loss(g, &case.cfg, &out, l_rpn, &case.sampled)?.total)
}

/// Three random coordinates of every parameter tensor.
/// Relative change of a central difference between `eps` and `eps / 2`
/// above which the probe is taken to straddle a kink (ReLU, max-pool or
/// bilinear cell boundary) or to sit below the difference resolution.
const FD_STABILITY: f64 = 2e-5;
const PROBES_PER_TENSOR: usize = 3;
const PROBE_ATTEMPTS: usize = 20;

fn loss_value(case: &LossCase, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss_graph(&mut g, case, &vars)?;
    Ok(g.scalar(out))
}

/// Random coordinates per parameter tensor at which the loss is smooth on
/// the scale of `eps`; decided from forward values only.
fn stable_probes(case: &LossCase, inputs: &[Tensor], eps: f64, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let mut probes = Vec::new();
    for (i, (name, t)) in case.params.iter().enumerate() {
        // Its gradient is identically zero; see the non-local check.
        if name == "bfp.phi.bias" {
            continue;
        }
        let mut found = 0;
        for _ in 0..PROBE_ATTEMPTS {
            if found == PROBES_PER_TENSOR {
                break;
            }
            let p = [(i, rng.gen_range(0..t.len()))];
            let coarse = central_difference(|xs| loss_value(case, xs), inputs, eps, &p)?[0];
            let fine = central_difference(|xs| loss_value(case, xs), inputs, eps / 2.0, &p)?[0];
            if relative_error(coarse, fine) <= FD_STABILITY {
                probes.push(p[0]);
                found += 1;
            }
        }
    }
    Ok(probes)
}

fn check_full_loss(seed: u64, eps: f64) -> Result<CaseResult> {
    let case = loss_case(seed)?;
    let mut rng = rng_for(seed, 9);
    let inputs: Vec<Tensor> = case.params.iter().map(|(_, t)| t.clone()).collect();
    let probes = stable_probes(&case, &inputs, eps, &mut rng)?;
    gc_at(|g, v| loss_graph(g, &case, v), &inputs, eps, &probes)
}

fn check_zero_offset(seed: u64, _eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 10);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(3..12), rng.gen_range(3..12));
        let k = rng.gen_range(1..5);
        let sampling = rng.gen_range(1..4);
        let n_rois = rng.gen_range(1..5);
        let mut g = Graph::new();
        let f = g.constant(randn(&mut rng, [2, 3, h, w], 1.0));
        // Boxes may hang over the border by up to two pixels.
        let rois: Vec<Roi> = random_rois(&mut rng, n_rois, 2, h, w)
            .into_iter()
            .map(|r| {
                let (dx, dy) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                let moved = r.translated(dx, dy);
                if moved.intersects(h, w) {
                    moved
                } else {
                    r
                }
            })
            .collect();
        let plain = fom::roi_pool(&mut g, f, &rois, k, sampling)?;
        let zeros = g.constant(Tensor::zeros([rois.len(), 2 * k * k, 1, 1]));
        let deformed = fom::deformable_roi_pool(&mut g, f, &rois, zeros, k, sampling)?;
        for (a, b) in g.value(plain).data().iter().zip(g.value(deformed).data()) {
            worst = worst.max((a - b).abs());
            probes += 1;
        }
    }
    Ok(CaseResult {
        max_error: worst,
        probes,
    })
}

fn random_pyramid(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize, finest: usize) -> FeaturePyramid {
    FeaturePyramid::new(
        (0..4)
            .map(|i| Level {
                index: i + 2,
                stride: 4 << i,
                map: g.constant(randn(rng, [1, c, (finest >> i).max(1), (finest >> i).max(1)], 1.0)),
            })
            .collect(),
    )
}

/// A zero refinement scattered back must leave every level bit-identical.
fn check_bfp_identity(seed: u64, _eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 11);
    let mut g = Graph::new();
    let c = rng.gen_range(1..6);
    let finest = [8, 16, 12][seed as usize % 3];
    let pyramid = random_pyramid(&mut g, &mut rng, c, finest);
    let balanced = bfp::integrate(&mut g, &pyramid, bfp::REFERENCE_LEVEL)?;
    let shape = g.value(balanced.b_mix).shape();
    let zero = g.constant(Tensor::zeros(shape));
    let out = bfp::rescatter(&mut g, &pyramid, zero)?;
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (a, b) in pyramid.levels.iter().zip(&out.levels) {
        for (x, y) in g.value(a.map).data().iter().zip(g.value(b.map).data()) {
            worst = worst.max((x - y).abs());
            if x.to_bits() != y.to_bits() {
                worst = worst.max(f64::MIN_POSITIVE);
            }
            probes += 1;
        }
    }
    Ok(CaseResult {
        max_error: worst,
        probes,
    })
}

/// Levels filled with 1, 2, 3 and 4 integrate to the constant 2.5.
fn check_bfp_constant(seed: u64, _eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 12);
    let mut g = Graph::new();
    let c = rng.gen_range(1..6);
    let finest: usize = [8, 16, 32, 12, 20][seed as usize % 5];
    let pyramid = FeaturePyramid::new(
        (0..4)
            .map(|i| {
                let side = (finest >> i).max(1);
                Level {
                    index: i + 2,
                    stride: 4 << i,
                    map: g.constant(Tensor::full([1, c, side, side], (i + 1) as f64)),
                }
            })
            .collect(),
    );
    let balanced = bfp::integrate(&mut g, &pyramid, bfp::REFERENCE_LEVEL)?;
    let v = g.value(balanced.b_mix).data();
    Ok(CaseResult {
        max_error: v.iter().map(|x| (x - 2.5).abs()).fold(0.0, f64::max),
        probes: v.len(),
    })
}

/// Small random detection problems with coarse coordinates and scores, so
/// that ties and exact IoU threshold hits occur.
pub fn random_eval_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.gen_range(1..4);
    let classes = rng.gen_range(1..3);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.gen_range(0..8) as f64;
        let y = rng.gen_range(0..8) as f64;
        BBox::new(x, y, x + rng.gen_range(1..6) as f64, y + rng.gen_range(1..6) as f64)
    };
    let gts: Vec<GroundTruth> = (0..rng.gen_range(0..6))
        .map(|_| GroundTruth {
            image_id: format!("i{}", rng.gen_range(0..images)),
            class_id: rng.gen_range(0..classes),
            bbox: rand_box(rng),
        })
        .collect();
    let dets: Vec<Detection> = (0..rng.gen_range(0..9))
        .map(|_| {
            let bbox = match gts.get(rng.gen_range(0..gts.len().max(1))) {
                Some(g) if rng.gen_bool(0.6) => {
                    let j = |rng: &mut ChaCha8Rng| rng.gen_range(-1..=1) as f64;
                    let b = BBox::new(g.bbox.x1 + j(rng), g.bbox.y1 + j(rng), g.bbox.x2 + j(rng), g.bbox.y2 + j(rng));
                    if b.is_valid() {
                        b
                    } else {
                        g.bbox
                    }
                }
                _ => rand_box(rng),
            };
            Detection {
                image_id: format!("i{}", rng.gen_range(0..images)),
                class_id: rng.gen_range(0..classes),
                bbox,
                score: rng.gen_range(0..5) as f64 / 4.0,
            }
        })
        .collect();
    (dets, gts)
}

fn check_ap_oracle(seed: u64, _eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 13);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..100 {
        let (dets, gts) = random_eval_instance(&mut rng);
        for (class, thr) in (0..2).flat_map(|c| THRESHOLDS.map(|t| (c, t))) {
            let dc: Vec<Detection> = dets.iter().filter(|d| d.class_id == class).cloned().collect();
            let gc: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == class).cloned().collect();
            let fast = average_precision(&dc.iter().collect::<Vec<_>>(), &gc.iter().collect::<Vec<_>>(), thr);
            let slow = brute_force_ap(&dc, &gc, thr);
            let err = match (fast, slow) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            };
            worst = worst.max(err);
            probes += 1;
        }
    }
    Ok(CaseResult {
        max_error: worst,
        probes,
    })
}

/// `AP25 ≥ mAP ≥ AP75` on random detection sets; the error is the largest
/// violation.
fn check_ap_ordering(seed: u64, _eps: f64) -> Result<CaseResult> {
    let mut rng = rng_for(seed, 14);
    let mut worst = 0.0f64;
    let mut probes = 0;
    while probes < 100 {
        let (dets, gts) = random_eval_instance(&mut rng);
        if gts.is_empty() {
            continue;
        }
        let r = map_suite(&dets, &gts)?;
        worst = worst.max(r.map - r.ap25).max(r.ap75 - r.map);
        probes += 1;
    }
    Ok(CaseResult {
        max_error: worst,
        probes,
    })
}
