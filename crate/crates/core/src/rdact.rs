//! The residual depth-aware cost transformer (RDACT).
//!
//! A grouped cost volume `[H, W, D, G]` is patch-embedded into tokens, run
//! through `L` pairs of windowed transformer layers — a regular-window layer
//! (DATL) followed by a shifted-window layer (DASTL) — and re-expanded to the
//! original resolution by the re-embedding layer (REC), which is added back
//! onto the input volume. Every learnable branch that feeds a residual add
//! starts at zero, so an untrained stack is exactly the identity.
//!
//! Each layer offers two attention sites: DA-SA2 attends along each window's
//! depth fibers (tokens sharing a spatial cell), DA-SA1 across the full 3D
//! window. The depth+spatial layer computes
//! `X̂ = MSA1(LN(MSA2(LN(x)))) + x; X = MLP(LN(X̂)) + X̂`; the spatial-only
//! variant skips the inner MSA2 stage.

use std::rc::Rc;

use rand::Rng;

use crate::attention::{attend, AttentionGeometry, AttentionParams, AttentionVars};
use crate::cost_volume::CostVolume;
use crate::error::{Error, Result};
use crate::ops::{LayerNormParams, LayerNormVars, LinearParams, LinearVars};
use crate::tape::{Tape, Var};
use crate::windows::{bias_bins, depth_bias_bins, patch_map_3d, upsample_map, WindowPlan, WindowSpec};

/// Which attention sites a transformer layer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerVariant {
    /// Window attention only.
    SpatialOnly,
    /// Depth-fiber attention feeding window attention (the full form).
    DepthSpatial,
}

/// Patch embedding: strided `h×w×1` patches of the grouped cost projected to
/// `E` channels, then layer-normalized.
#[derive(Clone, Debug)]
pub struct PatchEmbedParams {
    /// Spatial patch extents `(h, w)`; the depth extent is always 1.
    pub kernel: (usize, usize),
    /// `(h·w·G) -> E`.
    pub proj: LinearParams,
    pub norm: LayerNormParams,
}

impl PatchEmbedParams {
    pub fn init(groups: usize, embed: usize, kernel: (usize, usize), rng: &mut impl Rng) -> Self {
        PatchEmbedParams {
            kernel,
            proj: LinearParams::uniform_fan_in(kernel.0 * kernel.1 * groups, embed, rng),
            norm: LayerNormParams::identity(embed),
        }
    }

    pub fn bind(&self, tape: &Tape) -> PatchEmbedVars {
        PatchEmbedVars {
            proj: self.proj.bind(tape),
            norm: self.norm.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedVars {
    pub proj: LinearVars,
    pub norm: LayerNormVars,
}

/// One windowed transformer layer (used for both the regular and the shifted
/// half of a pair; the window plan decides which).
#[derive(Clone, Debug)]
pub struct DatlParams {
    /// Inner depth-attention stage: its layer norm and the fiber MSA.
    /// `None` for the spatial-only variant.
    pub depth: Option<(LayerNormParams, AttentionParams)>,
    pub spatial_norm: LayerNormParams,
    pub spatial_attn: AttentionParams,
    pub mlp_norm: LayerNormParams,
    /// `E -> 2E`.
    pub mlp_hidden: LinearParams,
    /// `2E -> E`, zero-initialized.
    pub mlp_out: LinearParams,
}

impl DatlParams {
    pub fn init(
        embed: usize,
        heads: usize,
        window: (usize, usize, usize),
        variant: LayerVariant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spatial_bins = (2 * window.0 - 1) * (2 * window.1 - 1) * (2 * window.2 - 1);
        let depth = match variant {
            LayerVariant::SpatialOnly => None,
            LayerVariant::DepthSpatial => Some((
                LayerNormParams::identity(embed),
                AttentionParams::init(embed, heads, 2 * window.2 - 1, rng)?,
            )),
        };
        Ok(DatlParams {
            depth,
            spatial_norm: LayerNormParams::identity(embed),
            spatial_attn: AttentionParams::init(embed, heads, spatial_bins, rng)?,
            mlp_norm: LayerNormParams::identity(embed),
            mlp_hidden: LinearParams::uniform_fan_in(embed, 2 * embed, rng),
            mlp_out: LinearParams::zeros(2 * embed, embed),
        })
    }

    pub fn bind(&self, tape: &Tape) -> DatlVars {
        DatlVars {
            depth: self
                .depth
                .as_ref()
                .map(|(ln, at)| (ln.bind(tape), at.bind(tape))),
            spatial_norm: self.spatial_norm.bind(tape),
            spatial_attn: self.spatial_attn.bind(tape),
            mlp_norm: self.mlp_norm.bind(tape),
            mlp_hidden: self.mlp_hidden.bind(tape),
            mlp_out: self.mlp_out.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DatlVars {
    pub depth: Option<(LayerNormVars, AttentionVars)>,
    pub spatial_norm: LayerNormVars,
    pub spatial_attn: AttentionVars,
    pub mlp_norm: LayerNormVars,
    pub mlp_hidden: LinearVars,
    pub mlp_out: LinearVars,
}

/// The full stack: embedding, `L` (regular, shifted) layer pairs, and the
/// zero-initialized re-embedding projection `E -> G`.
#[derive(Clone, Debug)]
pub struct RdactParams {
    pub embed: PatchEmbedParams,
    pub layers: Vec<(DatlParams, DatlParams)>,
    /// `E -> G`, zero-initialized (REC).
    pub rec: LinearParams,
    pub window: (usize, usize, usize),
    pub heads: usize,
    pub variant: LayerVariant,
    pub groups: usize,
}

impl RdactParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        groups: usize,
        embed: usize,
        patch: (usize, usize),
        window: (usize, usize, usize),
        layer_pairs: usize,
        heads: usize,
        variant: LayerVariant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layer_pairs == 0 {
            return Err(Error::arg("transformer stack needs at least one layer pair"));
        }
        // Separate bias tables and projections per layer, including between
        // the regular and shifted halves of a pair.
        let layers = (0..layer_pairs)
            .map(|_| {
                Ok((
                    DatlParams::init(embed, heads, window, variant, rng)?,
                    DatlParams::init(embed, heads, window, variant, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RdactParams {
            embed: PatchEmbedParams::init(groups, embed, patch, rng),
            layers,
            rec: LinearParams::zeros(embed, groups),
            window,
            heads,
            variant,
            groups,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.norm.dim()
    }

    pub fn bind(&self, tape: &Tape) -> RdactVars {
        RdactVars {
            embed: self.embed.bind(tape),
            layers: self
                .layers
                .iter()
                .map(|(a, b)| (a.bind(tape), b.bind(tape)))
                .collect(),
            rec: self.rec.bind(tape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RdactVars {
    pub embed: PatchEmbedVars,
    pub layers: Vec<(DatlVars, DatlVars)>,
    pub rec: LinearVars,
}

/// Window plan plus the attention geometries derived from it.
pub struct LayerContext {
    pub plan: WindowPlan,
    pub spatial: AttentionGeometry,
    /// Present when the layer runs depth-fiber attention.
    pub fibers: Option<AttentionGeometry>,
}

impl LayerContext {
    pub fn new(
        dims: (usize, usize, usize),
        window: (usize, usize, usize),
        shifted: bool,
        heads: usize,
        variant: LayerVariant,
    ) -> Result<LayerContext> {
        let plan = WindowPlan::new(dims, WindowSpec::new(window, shifted)?)?;
        let spatial = AttentionGeometry::new(
            plan.num_windows,
            plan.tokens_per_window,
            heads,
            &bias_bins(window),
            plan.mask.as_ref(),
        )?;
        let fibers = match variant {
            LayerVariant::SpatialOnly => None,
            LayerVariant::DepthSpatial => Some(AttentionGeometry::new(
                plan.num_windows * window.0 * window.1,
                window.2,
                heads,
                &depth_bias_bins(window.2),
                plan.fiber_mask.as_ref(),
            )?),
        };
        Ok(LayerContext {
            plan,
            spatial,
            fibers,
        })
    }
}

/// Everything about one stack's geometry that depends only on the volume
/// extents and the config — built once per stage, reused every step.
pub struct RdactContext {
    /// Cost volume extents `(H, W, D)`.
    pub dims: (usize, usize, usize),
    /// Token grid extents `(H*, W*, D*)`.
    pub embedded: (usize, usize, usize),
    patch: (usize, usize),
    patch_map: Rc<Vec<i64>>,
    upsample: Rc<Vec<i64>>,
    pub regular: LayerContext,
    pub shifted: LayerContext,
}

impl RdactContext {
    pub fn new(dims: (usize, usize, usize), params: &RdactParams) -> Result<RdactContext> {
        let (h, w, d) = dims;
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::arg("cost volume extents must be positive"));
        }
        let (ph, pw) = params.embed.kernel;
        let (map, h_star, w_star) = patch_map_3d(h, w, d, ph, pw);
        let embedded = (h_star, w_star, d);
        let regular = LayerContext::new(embedded, params.window, false, params.heads, params.variant)?;
        let shifted = LayerContext::new(embedded, params.window, true, params.heads, params.variant)?;
        Ok(RdactContext {
            dims,
            embedded,
            patch: (ph, pw),
            patch_map: Rc::new(map),
            upsample: Rc::new(upsample_map(h, w, d, ph, pw)),
            regular,
            shifted,
        })
    }

    pub fn token_count(&self) -> usize {
        self.embedded.0 * self.embedded.1 * self.embedded.2
    }
}

/// Window attention across all tokens of each 3D window (DA-SA1).
/// `windows` is `[Nw, T, E]`.
pub fn da_sa1(
    tape: &Tape,
    windows: Var,
    attn: &AttentionVars,
    geo: &AttentionGeometry,
) -> Result<Var> {
    Ok(attend(tape, windows, attn, geo)?.output)
}

/// Depth-fiber attention (DA-SA2): within each window, the `ds` tokens that
/// share a spatial cell attend among themselves. Window token order is
/// depth-fastest, so the fiber view is a plain reshape of `[Nw, T, E]`.
pub fn da_sa2(
    tape: &Tape,
    windows: Var,
    attn: &AttentionVars,
    fiber_geo: &AttentionGeometry,
) -> Result<Var> {
    let shape = tape.shape_of(windows);
    let fibers = tape.reshape(
        windows,
        &[fiber_geo.batch, fiber_geo.tokens, shape[2]],
    )?;
    let out = attend(tape, fibers, attn, fiber_geo)?.output;
    tape.reshape(out, &shape)
}

/// One transformer layer over volume-order tokens `[N, E]`; the window plan
/// in `lctx` decides regular vs. shifted partitioning. Shared with the 2D
/// regression stack, which passes contexts whose depth extent is 1.
pub fn transformer_layer(tape: &Tape, x: Var, vars: &DatlVars, lctx: &LayerContext) -> Result<Var> {
    let embed = *tape
        .shape_of(x)
        .last()
        .ok_or_else(|| Error::shape("tokens want rank ≥ 1".to_string()))?;
    let (nw, t) = (lctx.plan.num_windows, lctx.plan.tokens_per_window);
    let w0 = tape.gather_rows(x, embed, Rc::clone(&lctx.plan.partition_map), &[nw, t, embed])?;

    let attn_in = match (&vars.depth, &lctx.fibers) {
        (Some((ln, attn)), Some(fiber_geo)) => {
            let normed = tape.layer_norm_with(w0, *ln, 2)?;
            da_sa2(tape, normed, attn, fiber_geo)?
        }
        (None, _) => w0,
        (Some(_), None) => {
            return Err(Error::arg(
                "layer has depth-attention parameters but the context was built spatial-only",
            ))
        }
    };
    let normed = tape.layer_norm_with(attn_in, vars.spatial_norm, 2)?;
    let attended = da_sa1(tape, normed, &vars.spatial_attn, &lctx.spatial)?;
    let xh = tape.add(attended, w0)?;

    let normed = tape.layer_norm_with(xh, vars.mlp_norm, 2)?;
    let hidden = tape.gelu(tape.linear(normed, vars.mlp_hidden)?)?;
    let mlp = tape.linear(hidden, vars.mlp_out)?;
    let out = tape.add(mlp, xh)?;

    let n = lctx.plan.dims.0 * lctx.plan.dims.1 * lctx.plan.dims.2;
    tape.gather_rows(out, embed, Rc::clone(&lctx.plan.reverse_map), &[n, embed])
}

/// Regular-window layer (DATL).
pub fn datl_forward(tape: &Tape, x: Var, vars: &DatlVars, ctx: &RdactContext) -> Result<Var> {
    transformer_layer(tape, x, vars, &ctx.regular)
}

/// Shifted-window layer (DASTL).
pub fn dastl_forward(tape: &Tape, x: Var, vars: &DatlVars, ctx: &RdactContext) -> Result<Var> {
    transformer_layer(tape, x, vars, &ctx.shifted)
}

/// Embed the grouped cost volume `[H, W, D, G]` into `[N*, E]` tokens in
/// token-grid order (rows = (y*, x*, z), depth fastest).
pub fn patch_embed(
    tape: &Tape,
    cost: Var,
    vars: &PatchEmbedVars,
    ctx: &RdactContext,
) -> Result<Var> {
    let shape = tape.shape_of(cost);
    let groups = shape[3];
    let (ph, pw) = ctx.patch;
    let n = ctx.token_count();
    let taps = tape.gather_rows(
        cost,
        groups,
        Rc::clone(&ctx.patch_map),
        &[n * ph * pw, groups],
    )?;
    let stacked = tape.reshape(taps, &[n, ph * pw * groups])?;
    let projected = tape.linear(stacked, vars.proj)?;
    tape.layer_norm_with(projected, vars.norm, 1)
}

/// The full residual stack: `REC(layers(embed(C0))) + C0`.
pub fn rdact_forward(
    tape: &Tape,
    c0: &CostVolume,
    vars: &RdactVars,
    ctx: &RdactContext,
) -> Result<CostVolume> {
    let (h, w, d, g) = c0.dims(tape);
    if (h, w, d) != ctx.dims {
        return Err(Error::shape(format!(
            "cost volume is {:?}, context was built for {:?}",
            (h, w, d),
            ctx.dims
        )));
    }
    let mut x = patch_embed(tape, c0.cost, &vars.embed, ctx)?;
    for (regular, shifted) in &vars.layers {
        x = transformer_layer(tape, x, regular, &ctx.regular)?;
        x = transformer_layer(tape, x, shifted, &ctx.shifted)?;
    }
    let pixels = tape.gather_rows(x, tape.shape_of(x)[1], Rc::clone(&ctx.upsample), &[h * w * d, tape.shape_of(x)[1]])?;
    let rec = tape.linear(pixels, vars.rec)?;
    let rec = tape.reshape(rec, &[h, w, d, g])?;
    Ok(CostVolume {
        cost: tape.add(rec, c0.cost)?,
        channels: c0.channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(tape: &Tape, shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.leaf(Tensor::random_uniform(shape, -1.0, 1.0, &mut rng))
    }

    #[test]
    fn unit_patch_identity_projection_relabels_each_voxel() {
        // Patch 1×1, identity G→E projection. The layer norm standardizes
        // each voxel's vector, so feed vectors that are already zero-mean,
        // unit-variance: (a, −a, a, −a) with |a| = 1.
        let tape = Tape::new();
        let g = 4;
        let params = PatchEmbedParams {
            kernel: (1, 1),
            proj: LinearParams {
                weight: Tensor::from_fn(&[g, g], |i| if i / g == i % g { 1.0 } else { 0.0 }),
                bias: None,
            },
            norm: LayerNormParams::identity(g),
        };
        let dummy = RdactParams {
            embed: params.clone(),
            layers: vec![],
            rec: LinearParams::zeros(g, g),
            window: (2, 2, 2),
            heads: 2,
            variant: LayerVariant::SpatialOnly,
            groups: g,
        };
        let ctx = RdactContext::new((3, 3, 2), &dummy).unwrap();
        let cost = tape.leaf(Tensor::from_fn(&[3, 3, 2, g], |i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let flip = if (i / g) % 3 == 0 { -1.0 } else { 1.0 };
            sign * flip
        }));
        let vars = params.bind(&tape);
        let tokens = patch_embed(&tape, cost, &vars, &ctx).unwrap();
        let got = tape.value(tokens);
        let want = tape.value(cost);
        assert_eq!(got.shape(), &[18, g]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn embedding_shrinks_the_spatial_grid_and_keeps_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = RdactParams::init(
            4,
            8,
            (4, 4),
            (2, 2, 2),
            1,
            2,
            LayerVariant::SpatialOnly,
            &mut rng,
        )
        .unwrap();
        let ctx = RdactContext::new((8, 8, 5), &params).unwrap();
        assert_eq!(ctx.embedded, (2, 2, 5));
        // Indivisible extents round up.
        let ctx = RdactContext::new((10, 9, 3), &params).unwrap();
        assert_eq!(ctx.embedded, (3, 3, 3));
    }

    #[test]
    fn padded_patches_read_zeros() {
        // H = 5 with patch 4 pads to 8: the second token row's lower taps fall
        // outside the volume. With an all-ones cost and a sum projection, the
        // pre-norm value counts exactly the in-bounds taps.
        let tape = Tape::new();
        let g = 2;
        let params = PatchEmbedParams {
            kernel: (4, 1),
            proj: LinearParams {
                weight: Tensor::ones(&[4 * g, 1]),
                bias: None,
            },
            norm: LayerNormParams::identity(1),
        };
        let cost = tape.leaf(Tensor::ones(&[5, 1, 1, g]));
        let dummy = RdactParams {
            embed: params.clone(),
            layers: vec![],
            rec: LinearParams::zeros(1, g),
            window: (1, 1, 1),
            heads: 1,
            variant: LayerVariant::SpatialOnly,
            groups: g,
        };
        let ctx = RdactContext::new((5, 1, 1), &dummy).unwrap();
        let vars = params.bind(&tape);
        // Skip the norm by probing the projection directly.
        let taps = tape
            .gather_rows(cost, g, Rc::clone(&ctx.patch_map), &[2 * 4, g])
            .unwrap();
        let stacked = tape.reshape(taps, &[2, 4 * g]).unwrap();
        let projected = tape.linear(stacked, vars.proj).unwrap();
        let got = tape.value(projected);
        // Token 0 covers rows 0..4 (8 ones); token 1 covers row 4 plus three
        // padded rows (2 ones).
        assert_eq!(got.data(), &[8.0, 2.0]);
    }

    #[test]
    fn layers_start_as_the_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = RdactParams::init(
            4,
            8,
            (2, 2),
            (3, 3, 2),
            2,
            2,
            LayerVariant::DepthSpatial,
            &mut rng,
        )
        .unwrap();
        let ctx = RdactContext::new((6, 6, 4), &params).unwrap();
        let vars = params.bind(&tape);
        let x = random_volume(&tape, &[ctx.token_count(), 8], 4);
        let datl = datl_forward(&tape, x, &vars.layers[0].0, &ctx).unwrap();
        assert_eq!(tape.value(datl).data(), tape.value(x).data());
        let dastl = dastl_forward(&tape, x, &vars.layers[0].1, &ctx).unwrap();
        assert_eq!(tape.value(dastl).data(), tape.value(x).data());
    }

    #[test]
    fn zero_initialized_stack_returns_the_input_volume_exactly() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = RdactParams::init(
            4,
            8,
            (4, 4),
            (7, 7, 2),
            2,
            2,
            LayerVariant::DepthSpatial,
            &mut rng,
        )
        .unwrap();
        let ctx = RdactContext::new((8, 8, 4), &params).unwrap();
        let vars = params.bind(&tape);
        let cost = random_volume(&tape, &[8, 8, 4, 4], 6);
        let c0 = CostVolume {
            cost,
            channels: 8,
        };
        let out = rdact_forward(&tape, &c0, &vars, &ctx).unwrap();
        assert_eq!(tape.value(out.cost).data(), tape.value(cost).data());
        assert_eq!(out.channels, 8);
    }

    #[test]
    fn stage_default_shapes_survive_the_stack() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = RdactParams::init(
            8,
            8,
            (4, 4),
            (7, 7, 2),
            4,
            2,
            LayerVariant::DepthSpatial,
            &mut rng,
        )
        .unwrap();
        let ctx = RdactContext::new((16, 16, 8), &params).unwrap();
        assert_eq!(ctx.embedded, (4, 4, 8));
        let vars = params.bind(&tape);
        let cost = random_volume(&tape, &[16, 16, 8, 8], 8);
        let c0 = CostVolume {
            cost,
            channels: 32,
        };
        let out = rdact_forward(&tape, &c0, &vars, &ctx).unwrap();
        assert_eq!(tape.shape_of(out.cost), vec![16, 16, 8, 8]);
    }

    #[test]
    fn depth_fibers_with_identical_content_produce_identical_outputs() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut attn = AttentionParams::init(4, 2, 3, &mut rng).unwrap();
        attn.output = LinearParams::uniform_fan_in(4, 4, &mut rng);
        let vars = attn.bind(&tape);
        let geo = AttentionGeometry::new(2, 2, 2, &depth_bias_bins(2), None).unwrap();
        // Two fibers with the same two tokens.
        let fiber: Vec<f32> = vec![0.4, -0.2, 1.0, 0.3, -0.6, 0.8, 0.1, -0.9];
        let mut data = fiber.clone();
        data.extend_from_slice(&fiber);
        let windows = tape.leaf(Tensor::new(vec![1, 4, 4], data).unwrap());
        let out = da_sa2(&tape, windows, &vars, &geo).unwrap();
        let got = tape.value(out);
        let (a, b) = got.data().split_at(8);
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = RdactParams::init(
            2,
            4,
            (2, 2),
            (2, 2, 2),
            1,
            2,
            LayerVariant::DepthSpatial,
            &mut rng,
        )
        .unwrap();
        // Break the zero inits so gradients reach the inner parameters. The
        // depth stage's output projection must move too: it feeds the spatial
        // attention directly (no residual in between), so at exact zero the
        // spatial Q/K/V see an all-zero input and get no gradient until the
        // first optimizer step opens the gate.
        params.rec = LinearParams::uniform_fan_in(4, 2, &mut rng);
        params.layers[0].0.mlp_out = LinearParams::uniform_fan_in(8, 4, &mut rng);
        params.layers[0].0.spatial_attn.output = LinearParams::uniform_fan_in(4, 4, &mut rng);
        if let Some((_, depth_attn)) = params.layers[0].0.depth.as_mut() {
            depth_attn.output = LinearParams::uniform_fan_in(4, 4, &mut rng);
        }
        let ctx = RdactContext::new((4, 4, 2), &params).unwrap();
        let vars = params.bind(&tape);
        let cost = random_volume(&tape, &[4, 4, 2, 2], 12);
        let c0 = CostVolume { cost, channels: 4 };
        let out = rdact_forward(&tape, &c0, &vars, &ctx).unwrap();
        let loss = tape.sum_all(out.cost).unwrap();
        let grads = tape.backward(loss).unwrap();
        let layer = &vars.layers[0].0;
        for (name, var) in [
            ("cost", cost),
            ("embed proj", vars.embed.proj.weight),
            ("embed norm", vars.embed.norm.gamma),
            ("rec", vars.rec.weight),
            ("spatial q", layer.spatial_attn.query.weight),
            ("spatial bias", layer.spatial_attn.bias_table),
            ("depth q", layer.depth.unwrap().1.query.weight),
            ("mlp hidden", layer.mlp_hidden.weight),
        ] {
            let g = grads.wrt(var).unwrap_or_else(|| panic!("{name}: no gradient"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{name}: gradient identically zero"
            );
        }
    }
}
