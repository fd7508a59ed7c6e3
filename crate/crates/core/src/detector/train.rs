//! Training: one SGD step over a batch, and a resumable loop whose data
//! order and sampling randomness depend only on `(seed, step)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DetectorConfig, OptimConfig};
use super::loss::{total_loss, LossBreakdown};
use super::model::{features, forward_heads, rpn_head, stack_images};
use super::optim::{sgd_step, zero_momentum};
use super::params::ParamStore;
use super::rpn::{propose_image, pyramid_anchors, rpn_loss, rpn_targets};
use super::targets::sample_rois;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// A preprocessed training image with its annotations in input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    /// 0-based class ids, one per box.
    pub classes: Vec<usize>,
}

impl Sample {
    pub fn flipped(&self) -> Sample {
        let [_, c, h, w] = self.image.shape();
        let image = Tensor::from_fn([1, c, h, w], |[_, ch, y, x]| self.image.at(0, ch, y, w - 1 - x));
        Sample {
            image,
            boxes: self.boxes.iter().map(|b| b.flip_horizontal(w as f64)).collect(),
            classes: self.classes.clone(),
        }
    }
}

/// Parameters, momentum buffers and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub momentum: ParamStore,
    pub step: usize,
}

const STEP_RECORD: &str = "step";

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        let momentum = zero_momentum(&params);
        Self {
            params,
            momentum,
            step: 0,
        }
    }

    /// Writes momentum buffers and the step counter in checkpoint format.
    pub fn save_optimizer(&self, path: &Path) -> Result<()> {
        let mut s = self.momentum.clone();
        s.insert(STEP_RECORD, Tensor::scalar(self.step as f64));
        s.save(path)
    }

    pub fn resume(params: ParamStore, optimizer_path: &Path) -> Result<Self> {
        let mut saved = ParamStore::load(optimizer_path)?;
        let step = saved
            .get(STEP_RECORD)
            .map(|t| t.data()[0] as usize)
            .ok_or_else(|| Error::Checkpoint(format!("{}: no step record", optimizer_path.display())))?;
        let mut momentum = ParamStore::new();
        for (name, t) in params.iter() {
            let m = saved
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("momentum for {} missing", name)))?;
            if m.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("momentum for {} has the wrong shape", name)));
            }
            momentum.insert(name, m.clone());
        }
        Ok(Self {
            params,
            momentum,
            step,
        })
    }
}

/// Randomness for step `step`, independent of how many steps ran before.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step as u64 + 1);
    rng
}

/// Dataset indices for step `step`: consecutive slices of per-epoch
/// shuffles of `0..n`.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2 * epoch as u64);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

/// Forward, backward and one optimizer update. On a non-finite loss or
/// gradient the state is left untouched and an error names the step.
pub fn train_step(
    cfg: &DetectorConfig,
    optim: &OptimConfig,
    state: &mut TrainState,
    batch: &[&Sample],
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let lr = optim.lr_at(state.step);
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let [_, _, h, w] = images
        .first()
        .ok_or_else(|| Error::invalid("train_step", "empty batch"))?
        .shape();
    let gt_boxes: Vec<Vec<BBox>> = batch.iter().map(|s| s.boxes.clone()).collect();
    let gt_classes: Vec<Vec<usize>> = batch.iter().map(|s| s.classes.clone()).collect();

    let mut g = Graph::new();
    let p = state.params.bind(&mut g, true);
    let x = g.constant(stack_images(&images)?);
    let pyramid = features(&mut g, &p, cfg, x)?;
    let rpn = rpn_head(&mut g, &p, &pyramid)?;
    let anchors = pyramid_anchors(&g, &pyramid, &cfg.rpn);
    let shapes: Vec<[usize; 4]> = rpn.cls.iter().map(|v| g.value(*v).shape()).collect();
    let rpn_t = rpn_targets(&anchors, &shapes, &gt_boxes, &cfg.rpn, rng);
    let l_rpn = rpn_loss(&mut g, &rpn, &rpn_t, &cfg.rpn)?;

    let proposals: Vec<Vec<BBox>> = (0..batch.len())
        .map(|n| {
            propose_image(&g, &rpn, &anchors, n, h, w, &cfg.rpn, true)
                .into_iter()
                .map(|p| p.bbox)
                .collect()
        })
        .collect();
    let sampled = sample_rois(&proposals, &gt_boxes, &gt_classes, &cfg.roi, rng);
    if sampled.is_empty() {
        return Err(Error::invalid("train_step", "no RoIs sampled"));
    }
    let out = forward_heads(&mut g, &p, cfg, &pyramid, &sampled.rois)?;
    let losses = total_loss(&mut g, cfg, &out, l_rpn, &sampled)?;
    let breakdown = losses.breakdown(&g);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite {
            location: format!(
                "loss at step {} (l_rpn={}, l_cls={}, l_loc={}, l_fom={})",
                state.step + 1,
                breakdown.l_rpn,
                breakdown.l_cls,
                breakdown.l_loc,
                breakdown.l_fom
            ),
        });
    }
    g.backward(losses.total)?;
    let grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(state.params.iter())
        .map(|(v, (_, t))| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    if let Some(i) = grads.iter().position(|gr| gr.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            location: format!("gradient of {} at step {}", state.params.names()[i], state.step + 1),
        });
    }
    sgd_step(&mut state.params, &mut state.momentum, &grads, lr, optim)?;
    state.step += 1;
    Ok(breakdown)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_fom: f64,
    pub total: f64,
    pub lr: f64,
}

/// Runs steps until `state.step == optim.iterations`, calling `on_step`
/// after each one. Resuming from a saved state reproduces the trajectory
/// of an uninterrupted run.
pub fn train_loop(
    cfg: &DetectorConfig,
    optim: &OptimConfig,
    data: &[Sample],
    state: &mut TrainState,
    on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    train_until(cfg, optim, data, state, optim.iterations, on_step)
}

/// [`train_loop`] stopped once `state.step` reaches `until`, with the
/// schedule still laid out over `optim.iterations`.
pub fn train_until(
    cfg: &DetectorConfig,
    optim: &OptimConfig,
    data: &[Sample],
    state: &mut TrainState,
    until: usize,
    mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    optim.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    while state.step < until.min(optim.iterations) {
        let step = state.step;
        let lr = optim.lr_at(step);
        let mut rng = step_rng(optim.seed, step);
        let flips: Vec<bool> = (0..optim.batch_size).map(|_| rng.gen::<f64>() < optim.flip_prob).collect();
        let owned: Vec<std::borrow::Cow<Sample>> = batch_indices(optim.seed, step, optim.batch_size, data.len())
            .into_iter()
            .zip(flips)
            .map(|(i, flip)| {
                if flip {
                    std::borrow::Cow::Owned(data[i].flipped())
                } else {
                    std::borrow::Cow::Borrowed(&data[i])
                }
            })
            .collect();
        let batch: Vec<&Sample> = owned.iter().map(|c| c.as_ref()).collect();
        let l = train_step(cfg, optim, state, &batch, &mut rng)?;
        let record = StepRecord {
            step: state.step,
            l_rpn: l.l_rpn,
            l_cls: l.l_cls,
            l_loc: l.l_loc,
            l_fom: l.l_fom,
            total: l.total,
            lr,
        };
        on_step(&record, state)?;
    }
    Ok(())
}
