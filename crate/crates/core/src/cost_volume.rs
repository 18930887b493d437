//! Grouped correlation cost volumes and their spatial aggregation.
//!
//! The matching signal between the reference view and a warped source view is
//! a group-wise correlation: channels are split into `G` groups and each
//! group contributes one inner product, scaled by `G/C`. Per-view volumes are
//! fused with pixel-wise view weights, reduced to a single cost channel by a
//! 1×1×1 projection stack, and finally smoothed by an adaptive spatial
//! window: each pixel re-reads the cost at a small grid of (learned-offset)
//! sample points, weighted by feature similarity and inverse-depth
//! similarity.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{LinearParams, LinearVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A grouped correlation volume `[H, W, D, G]` plus the channel count of the
/// features it was built from.
#[derive(Clone, Copy, Debug)]
pub struct CostVolume {
    /// `[H, W, D, G]`.
    pub cost: Var,
    pub channels: usize,
}

impl CostVolume {
    pub fn dims(&self, tape: &Tape) -> (usize, usize, usize, usize) {
        let s = tape.shape_of(self.cost);
        debug_assert_eq!(s.len(), 4);
        (s[0], s[1], s[2], s[3])
    }
}

/// A single-channel cost `[H, W, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AggregatedCost {
    /// `[H, W, D]`.
    pub cost: Var,
}

/// Row-wise grouped inner products: `a` and `b` are `[R, C]`; the result is
/// `[R, G]` with entry `(r, g) = (G/C) · Σ_{c in group g} a[r,c]·b[r,c]`.
fn grouped_inner(tape: &Tape, a: Var, b: Var, channels: usize, groups: usize) -> Result<Var> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::arg(format!(
            "group count {groups} must divide channel count {channels}"
        )));
    }
    let rows = {
        let s = tape.shape_of(a);
        let len: usize = s.iter().product();
        len / channels
    };
    let prod = tape.mul(a, b)?;
    let regrouped = tape.reshape(prod, &[rows * groups, channels / groups])?;
    let sums = tape.sum_last(regrouped)?;
    let scaled = tape.scale(sums, groups as f32 / channels as f32)?;
    tape.reshape(scaled, &[rows, groups])
}

/// Group-wise correlation of reference features against a warped source
/// volume (higher = better match). `f0` is `[H, W, C]`, `warped` is
/// `[H, W, D, C]`, `valid` is the `[H, W, D]` warp mask; samples that fell
/// outside the source image get zero cost in every group.
pub fn groupwise_correlation(
    tape: &Tape,
    f0: Var,
    warped: Var,
    valid: &Tensor,
    groups: usize,
) -> Result<CostVolume> {
    let (h, w, d, c) = {
        let fs = tape.shape_of(f0);
        let ws = tape.shape_of(warped);
        if fs.len() != 3 || ws.len() != 4 || ws[0] != fs[0] || ws[1] != fs[1] || ws[3] != fs[2] {
            return Err(Error::shape(format!(
                "features {fs:?} and warped volume {ws:?} disagree"
            )));
        }
        (fs[0], fs[1], ws[2], fs[2])
    };
    if valid.shape() != [h, w, d] {
        return Err(Error::shape(format!(
            "valid mask wants [{h}, {w}, {d}], got {:?}",
            valid.shape()
        )));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::arg(format!(
            "group count {groups} must divide channel count {c}"
        )));
    }
    // Broadcast the reference features across the hypothesis axis.
    let mut bcast = Vec::with_capacity(h * w * d);
    for p in 0..h * w {
        for _ in 0..d {
            bcast.push(p as i64);
        }
    }
    let f0_d = tape.gather_rows(f0, c, Rc::new(bcast), &[h, w, d, c])?;
    let corr = grouped_inner(tape, f0_d, warped, c, groups)?;
    let vmask = tape.constant(valid.clone());
    let masked = tape.mul_rows(corr, vmask, groups)?;
    Ok(CostVolume {
        cost: tape.reshape(masked, &[h, w, d, groups])?,
        channels: c,
    })
}

/// Weighted per-pixel fusion of per-view cost volumes:
/// `S̄(p,j) = Σ_i w_i(p)·S_i(p,j) / Σ_i w_i(p)`, denominator clamped at 1e-8.
/// `view_weights` is `[N, H, W]`, non-negative.
pub fn fuse_views(
    tape: &Tape,
    per_view: &[CostVolume],
    view_weights: Var,
) -> Result<CostVolume> {
    let first = per_view
        .first()
        .ok_or_else(|| Error::arg("view fusion needs at least one source view"))?;
    let (h, w, d, g) = first.dims(tape);
    let n = per_view.len();
    for cv in per_view {
        if cv.dims(tape) != (h, w, d, g) || cv.channels != first.channels {
            return Err(Error::shape("per-view cost volumes disagree in shape".to_string()));
        }
    }
    {
        let ws = tape.shape_of(view_weights);
        if ws != [n, h, w] {
            return Err(Error::shape(format!(
                "view weights want [{n}, {h}, {w}], got {ws:?}"
            )));
        }
        if tape.value(view_weights).data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("view weights must be non-negative"));
        }
    }

    let pixel_rows: Rc<Vec<i64>> = Rc::new((0..(h * w) as i64).collect());
    let mut numer: Option<Var> = None;
    let mut denom: Option<Var> = None;
    for (i, cv) in per_view.iter().enumerate() {
        // Slice this view's weight map out of the stacked [N, H, W] tensor.
        let offset: Vec<i64> = pixel_rows.iter().map(|&p| p + (i * h * w) as i64).collect();
        let wi = tape.gather_rows(view_weights, 1, Rc::new(offset), &[h, w])?;
        let weighted = tape.mul_rows(cv.cost, wi, d * g)?;
        numer = Some(match numer {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
        denom = Some(match denom {
            None => wi,
            Some(acc) => tape.add(acc, wi)?,
        });
    }
    let numer = numer.expect("nonempty view list");
    let denom = tape.clamp_min(denom.expect("nonempty view list"), 1e-8)?;
    let fused = tape.mul_rows(numer, tape.recip(denom)?, d * g)?;
    Ok(CostVolume {
        cost: fused,
        channels: first.channels,
    })
}

/// Per-position projection of the `G` correlation groups down to one cost
/// channel (a stack of 1×1×1 convolutions with GELU between layers).
#[derive(Clone, Debug)]
pub struct GroupReduceParams {
    pub layers: Vec<LinearParams>,
}

impl GroupReduceParams {
    /// Single averaging layer: the initial cost is the plain group mean, so
    /// an untrained model already ranks hypotheses by correlation.
    pub fn mean_init(groups: usize) -> GroupReduceParams {
        GroupReduceParams {
            layers: vec![LinearParams {
                weight: Tensor::full(&[groups, 1], 1.0 / groups as f32),
                bias: Some(Tensor::zeros(&[1])),
            }],
        }
    }

    /// A deeper stack with randomly initialized hidden layers; `dims` runs
    /// from `groups` down to 1.
    pub fn deep_init(dims: &[usize], rng: &mut impl Rng) -> Result<GroupReduceParams> {
        if dims.len() < 2 || *dims.last().unwrap() != 1 {
            return Err(Error::arg("group reduction stack must end at one channel"));
        }
        Ok(GroupReduceParams {
            layers: dims
                .windows(2)
                .map(|d| LinearParams::uniform_fan_in(d[0], d[1], rng))
                .collect(),
        })
    }

    pub fn bind(&self, tape: &Tape) -> Vec<LinearVars> {
        self.layers.iter().map(|l| l.bind(tape)).collect()
    }
}

/// Collapse the group axis: `[H, W, D, G] -> [H, W, D]` via the projection
/// stack (first fan-in must be `G`, final fan-out 1).
pub fn reduce_groups(
    tape: &Tape,
    cv: &CostVolume,
    proj: &[LinearVars],
) -> Result<AggregatedCost> {
    let (h, w, d, g) = cv.dims(tape);
    let first = proj
        .first()
        .ok_or_else(|| Error::arg("group reduction needs at least one layer"))?;
    if tape.shape_of(first.weight)[0] != g {
        return Err(Error::shape(format!(
            "group reduction expects fan-in {g}, got {}",
            tape.shape_of(first.weight)[0]
        )));
    }
    if tape.shape_of(proj.last().unwrap().weight)[1] != 1 {
        return Err(Error::shape("group reduction must end at one channel".to_string()));
    }
    let mut x = cv.cost;
    for (i, layer) in proj.iter().enumerate() {
        if i > 0 {
            x = tape.gelu(x)?;
        }
        x = tape.linear(x, *layer)?;
    }
    Ok(AggregatedCost {
        cost: tape.reshape(x, &[h, w, d])?,
    })
}

/// Learnable state of the adaptive spatial window: the fixed sample grid, a
/// zero-initialized offset head reading the reference features, and the
/// similarity-to-weight head (sigmoid output).
#[derive(Clone, Debug)]
pub struct SpatialWindowParams {
    /// Base offsets `(dx, dy)`, e.g. the 3×3 grid for `K_e = 9`.
    pub grid: Vec<(f32, f32)>,
    /// `C -> 2·K_e`, zero-initialized so sampling starts on the plain grid.
    pub offset_net: LinearParams,
    /// `G -> … -> 1`; a sigmoid after the last layer yields `w_k`.
    pub weight_net: Vec<LinearParams>,
    pub groups: usize,
}

impl SpatialWindowParams {
    /// 3×3 unit grid, zero offsets, single zero weight layer: aggregation
    /// starts as an unweighted box filter (all `w_k` = 0.5, normalized out).
    pub fn grid3x3(channels: usize, groups: usize) -> Result<SpatialWindowParams> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::arg(format!(
                "group count {groups} must divide channel count {channels}"
            )));
        }
        let mut grid = Vec::with_capacity(9);
        for dy in -1..=1 {
            for dx in -1..=1 {
                grid.push((dx as f32, dy as f32));
            }
        }
        Ok(SpatialWindowParams {
            grid,
            offset_net: LinearParams::zeros(channels, 18),
            weight_net: vec![LinearParams::zeros(groups, 1)],
            groups,
        })
    }

    pub fn samples(&self) -> usize {
        self.grid.len()
    }

    pub fn bind(&self, tape: &Tape) -> SpatialWindowVars {
        SpatialWindowVars {
            offset_net: self.offset_net.bind(tape),
            weight_net: self.weight_net.iter().map(|l| l.bind(tape)).collect(),
        }
    }
}

/// Tape handles for [`SpatialWindowParams`].
#[derive(Clone, Debug)]
pub struct SpatialWindowVars {
    pub offset_net: LinearVars,
    pub weight_net: Vec<LinearVars>,
}

/// Adaptive spatial aggregation: every pixel re-reads the cost at
/// `K_e` bilinear sample points (fixed grid + learned offsets) and averages
/// them with weights `w_k·d_k` — feature-similarity times inverse-depth
/// similarity. Positions whose total weight vanishes (all samples off the
/// map) fall back to the pixel's own cost.
///
/// `f0` is `[H, W, C]`; `hyps` is the per-pixel depth hypothesis volume
/// `[H, W, D]` aligned with the cost's hypothesis axis.
pub fn adaptive_spatial_aggregate(
    tape: &Tape,
    c: &AggregatedCost,
    params: &SpatialWindowParams,
    vars: &SpatialWindowVars,
    f0: Var,
    hyps: Var,
) -> Result<AggregatedCost> {
    let (h, w, d) = {
        let s = tape.shape_of(c.cost);
        if s.len() != 3 {
            return Err(Error::shape(format!("cost wants rank 3, got {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    let channels = {
        let fs = tape.shape_of(f0);
        if fs.len() != 3 || fs[0] != h || fs[1] != w {
            return Err(Error::shape(format!(
                "features want [{h}, {w}, C], got {fs:?}"
            )));
        }
        fs[2]
    };
    if tape.shape_of(hyps) != [h, w, d] {
        return Err(Error::shape(format!(
            "hypotheses want [{h}, {w}, {d}], got {:?}",
            tape.shape_of(hyps)
        )));
    }
    if channels != params.offset_net.fan_in() || params.offset_net.fan_out() != 2 * params.samples()
    {
        return Err(Error::shape(format!(
            "offset net maps {} -> {}, expected {} -> {}",
            params.offset_net.fan_in(),
            params.offset_net.fan_out(),
            channels,
            2 * params.samples()
        )));
    }
    let k = params.samples();
    let pixels = h * w;

    // Sample coordinates: pixel + grid offset + learned offset, flattened to
    // [pixels·K, 2] in (x, y) order.
    let mut base = Tensor::zeros(&[pixels * k, 2]);
    for y in 0..h {
        for x in 0..w {
            for (s, &(dx, dy)) in params.grid.iter().enumerate() {
                let row = (y * w + x) * k + s;
                base.data_mut()[row * 2] = x as f32 + dx;
                base.data_mut()[row * 2 + 1] = y as f32 + dy;
            }
        }
    }
    let learned = tape.linear(f0, vars.offset_net)?; // [H, W, 2K]
    let learned = tape.reshape(learned, &[pixels * k, 2])?;
    let coords = tape.add(tape.constant(base), learned)?;

    // Everything the window needs, sampled at those coordinates.
    let (cost_s, valid) = tape.bilinear_sample(c.cost, coords)?;
    let (f0_s, _) = tape.bilinear_sample(f0, coords)?;
    let inv_hyps = tape.recip(hyps)?;
    let (invd_s, _) = tape.bilinear_sample(inv_hyps, coords)?;

    // Center quantities broadcast across the K samples.
    let center_map: Rc<Vec<i64>> = Rc::new(
        (0..pixels as i64)
            .flat_map(|p| std::iter::repeat(p).take(k))
            .collect(),
    );
    let f0_c = tape.gather_rows(f0, channels, Rc::clone(&center_map), &[pixels * k, channels])?;
    let invd_c = tape.gather_rows(inv_hyps, d, Rc::clone(&center_map), &[pixels * k, d])?;

    // w_k: sigmoid-squashed projection of the grouped feature correlation.
    let corr = grouped_inner(tape, f0_s, f0_c, channels, params.groups)?;
    let mut wk = corr;
    for (i, layer) in vars.weight_net.iter().enumerate() {
        if i > 0 {
            wk = tape.gelu(wk)?;
        }
        wk = tape.linear(wk, *layer)?;
    }
    if tape.shape_of(wk).last() != Some(&1) {
        return Err(Error::shape("weight net must end at one channel".to_string()));
    }
    let wk = tape.sigmoid(tape.reshape(wk, &[pixels * k])?)?;

    // d_k: sigmoid of the negated absolute inverse-depth difference.
    let dk = tape.sigmoid(tape.neg(tape.abs(tape.sub(invd_s, invd_c)?)?)?)?;

    // u = w_k · d_k · valid, per (pixel, sample, hypothesis).
    let u = tape.mul_rows(dk, wk, d)?;
    let u = tape.mul_rows(u, tape.constant(valid), d)?;

    // Normalized weighted sum over the K samples.
    let weighted = tape.mul(u, cost_s)?;
    let mut numer: Option<Var> = None;
    let mut denom: Option<Var> = None;
    for s in 0..k {
        let slice_map: Rc<Vec<i64>> = Rc::new((0..pixels).map(|p| (p * k + s) as i64).collect());
        let ws = tape.gather_rows(weighted, d, Rc::clone(&slice_map), &[pixels, d])?;
        let us = tape.gather_rows(u, d, slice_map, &[pixels, d])?;
        numer = Some(match numer {
            None => ws,
            Some(acc) => tape.add(acc, ws)?,
        });
        denom = Some(match denom {
            None => us,
            Some(acc) => tape.add(acc, us)?,
        });
    }
    let numer = numer.expect("grid is nonempty");
    let denom = denom.expect("grid is nonempty");

    // Where every sample was struck out, keep the pixel's own cost instead of
    // dividing by (clamped) zero. The selector is data-independent of the
    // gradient path: a plain 0/1 constant.
    let keep = {
        let dv = tape.value(denom);
        Tensor::from_fn(&[pixels, d], |i| if dv.data()[i] > 1e-8 { 1.0 } else { 0.0 })
    };
    let fallback = Tensor::from_fn(&[pixels, d], |i| 1.0 - keep.data()[i]);
    let safe = tape.mul(numer, tape.recip(tape.clamp_min(denom, 1e-8)?)?)?;
    let kept = tape.mul(safe, tape.constant(keep))?;
    let center = tape.mul(tape.reshape(c.cost, &[pixels, d])?, tape.constant(fallback))?;
    let out = tape.add(kept, center)?;
    Ok(AggregatedCost {
        cost: tape.reshape(out, &[h, w, d])?,
    })
}
