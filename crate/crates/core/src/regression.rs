//! Soft-argmin depth regression and the multi-stage training loss.
//!
//! Correlation costs are similarities (larger = better match), so the
//! softmax runs directly over the hypothesis axis and the regressed depth is
//! the resulting expectation. The training loss is a masked smooth-L1 per
//! stage and iteration, summed without weighting; there is no refinement
//! module, so its term is identically zero.

use std::rc::Rc;

use crate::cost_volume::AggregatedCost;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Softmax-expectation over the hypothesis axis: `depth(p) = Σ_j
/// softmax_j(c(p,·)) · d_j`. `hyps` is `[H, W, D]` (per-pixel hypotheses) or
/// `[D]` (shared across pixels); the result is `[H, W]`.
pub fn soft_argmin(tape: &Tape, c: &AggregatedCost, hyps: Var) -> Result<Var> {
    let (h, w, d) = {
        let s = tape.shape_of(c.cost);
        if s.len() != 3 {
            return Err(Error::shape(format!("cost wants rank 3, got {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    let hyps_full = match tape.shape_of(hyps).as_slice() {
        [n] if *n == d => {
            let map: Vec<i64> = (0..h * w).flat_map(|_| 0..d as i64).collect();
            tape.gather_rows(hyps, 1, Rc::new(map), &[h, w, d])?
        }
        [hh, ww, dd] if (*hh, *ww, *dd) == (h, w, d) => hyps,
        other => {
            return Err(Error::shape(format!(
                "hypotheses want [{d}] or [{h}, {w}, {d}], got {other:?}"
            )))
        }
    };
    let probs = tape.softmax(c.cost, 2)?;
    tape.sum_last(tape.mul(probs, hyps_full)?)
}

/// Masked mean smooth-L1 between a predicted and a reference map. `valid` is
/// 0/1; an empty mask yields a constant zero (no gradient).
pub fn stage_loss(tape: &Tape, pred: Var, gt: &Tensor, valid: &Tensor) -> Result<Var> {
    let shape = tape.shape_of(pred);
    if gt.shape() != shape.as_slice() || valid.shape() != shape.as_slice() {
        return Err(Error::shape(format!(
            "prediction {shape:?}, reference {:?}, and mask {:?} must agree",
            gt.shape(),
            valid.shape()
        )));
    }
    let count = valid.data().iter().filter(|&&v| v != 0.0).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let diff = tape.sub(pred, tape.constant(gt.clone()))?;
    let per_pixel = tape.smooth_l1(diff)?;
    let masked = tape.mul(per_pixel, tape.constant(valid.clone()))?;
    let total = tape.sum_all(masked)?;
    tape.scale(total, 1.0 / count as f32)
}

/// The loss terms of one training step: one scalar per (stage, iteration),
/// plus the (always zero here) refinement term.
pub struct LossTerms {
    pub per_stage: Vec<Vec<Var>>,
    pub l_ref: f32,
}

/// Unweighted sum of every per-stage, per-iteration term plus `l_ref`.
pub fn total_loss(tape: &Tape, terms: &LossTerms) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for stage in &terms.per_stage {
        for &term in stage {
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    let base = match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    if terms.l_ref == 0.0 {
        Ok(base)
    } else {
        tape.add_scalar(base, terms.l_ref)
    }
}
