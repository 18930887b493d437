//! The residual regression transformer (RRT).
//!
//! Runs on the single-channel aggregated cost just before soft-argmin. The
//! depth axis is treated as the channel axis of a 2D map: `[H, W, D]` is
//! embedded per pixel to `E_r` channels, refined by pairs of
//! (regular, shifted) 2D windowed transformer layers — the same machinery as
//! the 3D stack with a depth extent of 1 and no depth-fiber attention — and
//! re-embedded to `D` channels (RER, zero-initialized) as a residual on the
//! input.

use std::rc::Rc;

use rand::Rng;

use crate::cost_volume::AggregatedCost;
use crate::error::{Error, Result};
use crate::ops::{LinearParams, LinearVars};
use crate::rdact::{DatlParams, DatlVars, LayerContext, LayerVariant};
use crate::tape::{Tape, Var};
use crate::windows::{patch_map_3d, upsample_map};

/// One iteration's transformer stack (models keep one per PatchMatch
/// iteration).
#[derive(Clone, Debug)]
pub struct RrtParams {
    /// Spatial patch extent (1 = per-pixel embedding; 4 = coarser tokens).
    pub patch: usize,
    /// `(patch²·D) -> E_r`.
    pub embed: LinearParams,
    /// (regular, shifted) layer pairs, spatial-only form.
    pub layers: Vec<(DatlParams, DatlParams)>,
    /// `E_r -> D`, zero-initialized (RER).
    pub rer: LinearParams,
    pub window: usize,
    pub heads: usize,
}

impl RrtParams {
    pub fn init(
        depths: usize,
        embed: usize,
        patch: usize,
        window: usize,
        layer_pairs: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch == 0 || window == 0 || layer_pairs == 0 {
            return Err(Error::arg("patch, window, and layer count must be positive"));
        }
        let layers = (0..layer_pairs)
            .map(|_| {
                Ok((
                    DatlParams::init(embed, heads, (window, window, 1), LayerVariant::SpatialOnly, rng)?,
                    DatlParams::init(embed, heads, (window, window, 1), LayerVariant::SpatialOnly, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RrtParams {
            patch,
            embed: LinearParams::uniform_fan_in(patch * patch * depths, embed, rng),
            layers,
            rer: LinearParams::zeros(embed, depths),
            window,
            heads,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.fan_out()
    }

    pub fn bind(&self, tape: &Tape) -> RrtVars {
        RrtVars {
            embed: self.embed.bind(tape),
            layers: self
                .layers
                .iter()
                .map(|(a, b)| (a.bind(tape), b.bind(tape)))
                .collect(),
            rer: self.rer.bind(tape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RrtVars {
    pub embed: LinearVars,
    pub layers: Vec<(DatlVars, DatlVars)>,
    pub rer: LinearVars,
}

/// Geometry for one stack at fixed `(H, W, D)`.
pub struct RrtContext {
    pub dims: (usize, usize, usize),
    /// Token grid `(H*, W*)`.
    pub grid: (usize, usize),
    patch: usize,
    /// Present only when `patch > 1`.
    patch_map: Option<Rc<Vec<i64>>>,
    upsample: Option<Rc<Vec<i64>>>,
    pub regular: LayerContext,
    pub shifted: LayerContext,
}

impl RrtContext {
    pub fn new(dims: (usize, usize, usize), params: &RrtParams) -> Result<RrtContext> {
        let (h, w, d) = dims;
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::arg("cost extents must be positive"));
        }
        let p = params.patch;
        let (grid, patch_map, upsample) = if p == 1 {
            ((h, w), None, None)
        } else {
            let (map, h_star, w_star) = patch_map_3d(h, w, 1, p, p);
            (
                (h_star, w_star),
                Some(Rc::new(map)),
                Some(Rc::new(upsample_map(h, w, 1, p, p))),
            )
        };
        let wspec = (params.window, params.window, 1);
        let token_dims = (grid.0, grid.1, 1);
        Ok(RrtContext {
            dims,
            grid,
            patch: p,
            patch_map,
            upsample,
            regular: LayerContext::new(token_dims, wspec, false, params.heads, LayerVariant::SpatialOnly)?,
            shifted: LayerContext::new(token_dims, wspec, true, params.heads, LayerVariant::SpatialOnly)?,
        })
    }

    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Depth-as-channel embedding: `[H, W, D] -> [H*·W*, E_r]` (a plain per-pixel
/// projection when the patch extent is 1).
pub fn rrt_embed(tape: &Tape, cost: Var, vars: &RrtVars, ctx: &RrtContext) -> Result<Var> {
    let shape = tape.shape_of(cost);
    if shape.len() != 3 || (shape[0], shape[1], shape[2]) != ctx.dims {
        return Err(Error::shape(format!(
            "cost wants {:?}, got {shape:?}",
            ctx.dims
        )));
    }
    let d = ctx.dims.2;
    let n = ctx.token_count();
    let rows = match &ctx.patch_map {
        None => tape.reshape(cost, &[n, d])?,
        Some(map) => {
            let taps = tape.gather_rows(cost, d, Rc::clone(map), &[n * ctx.patch * ctx.patch, d])?;
            tape.reshape(taps, &[n, ctx.patch * ctx.patch * d])?
        }
    };
    tape.linear(rows, vars.embed)
}

/// The full residual stack: `RER(layers(embed(C̃0))) + C̃0`.
pub fn rrt_forward(
    tape: &Tape,
    c0: &AggregatedCost,
    vars: &RrtVars,
    ctx: &RrtContext,
) -> Result<AggregatedCost> {
    let (h, w, d) = ctx.dims;
    let mut x = rrt_embed(tape, c0.cost, vars, ctx)?;
    for (regular, shifted) in &vars.layers {
        x = crate::rdact::transformer_layer(tape, x, regular, &ctx.regular)?;
        x = crate::rdact::transformer_layer(tape, x, shifted, &ctx.shifted)?;
    }
    let pixels = match &ctx.upsample {
        None => x,
        Some(map) => {
            let e = tape.shape_of(x)[1];
            tape.gather_rows(x, e, Rc::clone(map), &[h * w, e])?
        }
    };
    let rer = tape.linear(pixels, vars.rer)?;
    let rer = tape.reshape(rer, &[h, w, d])?;
    Ok(AggregatedCost {
        cost: tape.add(rer, c0.cost)?,
    })
}
