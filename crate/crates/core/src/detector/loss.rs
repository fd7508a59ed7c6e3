use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use super::model::DetectorOutput;
use super::targets::SampledRois;
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Scalar values of the four loss terms and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_fom: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_rpn, self.l_cls, self.l_loc, self.l_fom, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// `|total − (l_rpn + l_cls + l_loc + l_fom)|`.
    pub fn additivity_error(&self) -> f64 {
        (self.total - (self.l_rpn + self.l_cls + self.l_loc + self.l_fom)).abs()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rpn: Var,
    pub cls: Var,
    pub loc: Var,
    pub fom: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_rpn: g.scalar(self.rpn),
            l_cls: g.scalar(self.cls),
            l_loc: g.scalar(self.loc),
            l_fom: g.scalar(self.fom),
            total: g.scalar(self.total),
        }
    }
}

/// `l_cls`: softmax cross-entropy over every sampled RoI. `l_loc`: smooth-L1
/// on the deltas of positives, averaged over positives. `l_fom`: softmax
/// cross-entropy of the auxiliary logits on positives, times
/// `fom_loss_weight`. Terms with nothing to average over are exactly zero.
pub fn total_loss(
    g: &mut Graph,
    cfg: &DetectorConfig,
    out: &DetectorOutput,
    rpn: Var,
    sampled: &SampledRois,
) -> Result<LossVars> {
    let cls = g.softmax_cross_entropy(out.cls_logits, &sampled.labels)?;

    let pos = &sampled.positive_rows;
    let loc = if pos.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut idx = Vec::with_capacity(4 * pos.len());
        let mut targets = Vec::with_capacity(4 * pos.len());
        for &r in pos {
            for j in 0..4 {
                idx.push(4 * r + j);
                targets.push(sampled.targets[4 * r + j]);
            }
        }
        g.smooth_l1(out.deltas, &idx, &targets, cfg.roi.smooth_l1_beta, pos.len() as f64)?
    };

    let fom = match out.fom_logits {
        Some(logits) if !pos.is_empty() => {
            let labels: Vec<usize> = pos.iter().map(|&r| sampled.labels[r]).collect();
            let ce = g.softmax_cross_entropy_rows(logits, pos, &labels)?;
            if cfg.fom_loss_weight == 1.0 {
                ce
            } else {
                g.scale(ce, cfg.fom_loss_weight)
            }
        }
        _ => g.constant(Tensor::scalar(0.0)),
    };

    let total = g.sum(&[rpn, cls, loc, fom])?;
    Ok(LossVars {
        rpn,
        cls,
        loc,
        fom,
        total,
    })
}
