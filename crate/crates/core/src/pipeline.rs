//! End-to-end orchestration: the model, its parameter registry, the
//! coarse-to-fine forward pass, and the training loop.
//!
//! Every parameter tensor is reachable through one canonical traversal, which
//! serves four masters with a single ordering: binding onto a tape (with a
//! name→handle registry for the optimizer), flattening into checkpoint
//! entries, assigning updated tensors back, and loading a checkpoint by name.
//!
//! Per stage and iteration the forward pass runs: warp each source view to
//! the reference at the current hypotheses → group-wise correlation → fuse
//! views under frozen per-pixel view weights → windowed transformer
//! aggregation over the grouped volume → group reduction → adaptive spatial
//! aggregation → regression transformer → soft-argmin. The regressed depth
//! re-centers the next iteration's hypotheses; stage transitions upsample it.

use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, AttentionVars};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::cost_volume::{
    adaptive_spatial_aggregate, fuse_views, groupwise_correlation, reduce_groups, CostVolume,
    GroupReduceParams, SpatialWindowParams, SpatialWindowVars,
};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureExtractorParams, FeatureExtractorVars};
use crate::geometry::{
    generate_hypotheses, refine_hypotheses, scale_intrinsics, warp_feature_volume,
    HypothesisSpacing, WarpRig,
};
use crate::ops::{LayerNormParams, LayerNormVars, LinearParams, LinearVars};
use crate::rdact::{
    rdact_forward, DatlParams, DatlVars, LayerVariant, PatchEmbedParams, PatchEmbedVars,
    RdactContext, RdactParams, RdactVars,
};
use crate::regression::{soft_argmin, stage_loss, total_loss, LossTerms};
use crate::rrt::{rrt_forward, RrtContext, RrtParams, RrtVars};
use crate::synthetic::SyntheticScene;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Parameter traversal

/// Receives every parameter tensor once, in canonical order. Implementations
/// that do not bind return [`Var::dangling`]; the `Vars` structures they
/// assemble are discarded unused.
trait ParamSink {
    fn tensor(&mut self, name: String, value: &mut Tensor) -> Var;
}

struct BindSink<'a> {
    tape: &'a Tape,
    registry: Vec<(String, Var)>,
}

impl ParamSink for BindSink<'_> {
    fn tensor(&mut self, name: String, value: &mut Tensor) -> Var {
        let var = self.tape.leaf(value.clone());
        self.registry.push((name, var));
        var
    }
}

struct FlattenSink {
    out: Vec<(String, Tensor)>,
}

impl ParamSink for FlattenSink {
    fn tensor(&mut self, name: String, value: &mut Tensor) -> Var {
        self.out.push((name, value.clone()));
        Var::dangling()
    }
}

struct AssignSink {
    src: std::vec::IntoIter<Tensor>,
    error: Option<Error>,
}

impl ParamSink for AssignSink {
    fn tensor(&mut self, name: String, value: &mut Tensor) -> Var {
        if self.error.is_some() {
            return Var::dangling();
        }
        match self.src.next() {
            Some(t) if t.shape() == value.shape() => *value = t,
            Some(t) => {
                self.error = Some(Error::shape(format!(
                    "assignment to {name} wants {:?}, got {:?}",
                    value.shape(),
                    t.shape()
                )))
            }
            None => self.error = Some(Error::arg(format!("assignment ran dry at {name}"))),
        }
        Var::dangling()
    }
}

struct LoadSink {
    map: HashMap<String, Tensor>,
    error: Option<Error>,
}

impl ParamSink for LoadSink {
    fn tensor(&mut self, name: String, value: &mut Tensor) -> Var {
        if self.error.is_some() {
            return Var::dangling();
        }
        match self.map.remove(&name) {
            Some(t) if t.shape() == value.shape() => *value = t,
            Some(t) => {
                self.error = Some(Error::Format(format!(
                    "checkpoint entry {name} has shape {:?}, model wants {:?}",
                    t.shape(),
                    value.shape()
                )))
            }
            None => self.error = Some(Error::Format(format!("checkpoint lacks entry {name}"))),
        }
        Var::dangling()
    }
}

fn visit_linear<S: ParamSink>(s: &mut S, prefix: &str, p: &mut LinearParams) -> LinearVars {
    LinearVars {
        weight: s.tensor(format!("{prefix}.weight"), &mut p.weight),
        bias: p
            .bias
            .as_mut()
            .map(|b| s.tensor(format!("{prefix}.bias"), b)),
    }
}

fn visit_norm<S: ParamSink>(s: &mut S, prefix: &str, p: &mut LayerNormParams) -> LayerNormVars {
    LayerNormVars {
        gamma: s.tensor(format!("{prefix}.gamma"), &mut p.gamma),
        beta: s.tensor(format!("{prefix}.beta"), &mut p.beta),
    }
}

fn visit_attention<S: ParamSink>(
    s: &mut S,
    prefix: &str,
    p: &mut AttentionParams,
) -> AttentionVars {
    AttentionVars {
        query: visit_linear(s, &format!("{prefix}.query"), &mut p.query),
        key: visit_linear(s, &format!("{prefix}.key"), &mut p.key),
        value: visit_linear(s, &format!("{prefix}.value"), &mut p.value),
        output: visit_linear(s, &format!("{prefix}.output"), &mut p.output),
        bias_table: s.tensor(format!("{prefix}.bias_table"), &mut p.bias_table),
        heads: p.heads,
    }
}

fn visit_datl<S: ParamSink>(s: &mut S, prefix: &str, p: &mut DatlParams) -> DatlVars {
    DatlVars {
        depth: p.depth.as_mut().map(|(norm, attn)| {
            (
                visit_norm(s, &format!("{prefix}.depth_norm"), norm),
                visit_attention(s, &format!("{prefix}.depth_attn"), attn),
            )
        }),
        spatial_norm: visit_norm(s, &format!("{prefix}.spatial_norm"), &mut p.spatial_norm),
        spatial_attn: visit_attention(s, &format!("{prefix}.spatial_attn"), &mut p.spatial_attn),
        mlp_norm: visit_norm(s, &format!("{prefix}.mlp_norm"), &mut p.mlp_norm),
        mlp_hidden: visit_linear(s, &format!("{prefix}.mlp_hidden"), &mut p.mlp_hidden),
        mlp_out: visit_linear(s, &format!("{prefix}.mlp_out"), &mut p.mlp_out),
    }
}

fn visit_patch_embed<S: ParamSink>(
    s: &mut S,
    prefix: &str,
    p: &mut PatchEmbedParams,
) -> PatchEmbedVars {
    PatchEmbedVars {
        proj: visit_linear(s, &format!("{prefix}.proj"), &mut p.proj),
        norm: visit_norm(s, &format!("{prefix}.norm"), &mut p.norm),
    }
}

fn visit_layer_pairs<S: ParamSink>(
    s: &mut S,
    prefix: &str,
    layers: &mut [(DatlParams, DatlParams)],
) -> Vec<(DatlVars, DatlVars)> {
    layers
        .iter_mut()
        .enumerate()
        .map(|(i, (regular, shifted))| {
            (
                visit_datl(s, &format!("{prefix}.layer{i}.regular"), regular),
                visit_datl(s, &format!("{prefix}.layer{i}.shifted"), shifted),
            )
        })
        .collect()
}

fn visit_rdact<S: ParamSink>(s: &mut S, prefix: &str, p: &mut RdactParams) -> RdactVars {
    RdactVars {
        embed: visit_patch_embed(s, &format!("{prefix}.patch"), &mut p.embed),
        layers: visit_layer_pairs(s, prefix, &mut p.layers),
        rec: visit_linear(s, &format!("{prefix}.rec"), &mut p.rec),
    }
}

fn visit_rrt<S: ParamSink>(s: &mut S, prefix: &str, p: &mut RrtParams) -> RrtVars {
    RrtVars {
        embed: visit_linear(s, &format!("{prefix}.embed"), &mut p.embed),
        layers: visit_layer_pairs(s, prefix, &mut p.layers),
        rer: visit_linear(s, &format!("{prefix}.rer"), &mut p.rer),
    }
}

fn visit_reduce<S: ParamSink>(
    s: &mut S,
    prefix: &str,
    p: &mut GroupReduceParams,
) -> Vec<LinearVars> {
    p.layers
        .iter_mut()
        .enumerate()
        .map(|(i, layer)| visit_linear(s, &format!("{prefix}.proj{i}"), layer))
        .collect()
}

fn visit_aggregate<S: ParamSink>(
    s: &mut S,
    prefix: &str,
    p: &mut SpatialWindowParams,
) -> SpatialWindowVars {
    SpatialWindowVars {
        offset_net: visit_linear(s, &format!("{prefix}.offsets"), &mut p.offset_net),
        weight_net: p
            .weight_net
            .iter_mut()
            .enumerate()
            .map(|(i, layer)| visit_linear(s, &format!("{prefix}.weight{i}"), layer))
            .collect(),
    }
}

fn visit_features<S: ParamSink>(
    s: &mut S,
    prefix: &str,
    p: &mut FeatureExtractorParams,
) -> FeatureExtractorVars {
    FeatureExtractorVars {
        trunk: p
            .trunk
            .iter_mut()
            .enumerate()
            .map(|(l, layer)| visit_linear(s, &format!("{prefix}.trunk{l}"), layer))
            .collect(),
        heads: p
            .heads
            .iter_mut()
            .enumerate()
            .map(|(l, layer)| visit_linear(s, &format!("{prefix}.head{l}"), layer))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Model

struct StageParams {
    rdact: RdactParams,
    reduce: GroupReduceParams,
    aggregate: SpatialWindowParams,
    rrt: Vec<RrtParams>,
}

/// The full model: feature pyramid plus one parameter pack per stage.
pub struct Model {
    pub config: ModelConfig,
    features: FeatureExtractorParams,
    stages: Vec<StageParams>,
}

/// Tape handles for one bound forward pass.
pub struct ModelVars {
    features: FeatureExtractorVars,
    stages: Vec<StageVars>,
}

struct StageVars {
    rdact: RdactVars,
    reduce: Vec<LinearVars>,
    aggregate: SpatialWindowVars,
    rrt: Vec<RrtVars>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureExtractorParams::init(config.stages.len(), &mut rng)?;
        let channels = features.stage_channels();
        let mut stages = Vec::with_capacity(config.stages.len());
        for (k, sc) in config.stages.iter().enumerate() {
            if channels[k] % sc.groups != 0 {
                return Err(Error::Config(format!(
                    "stage {k}: {} groups do not divide the {}-channel features",
                    sc.groups, channels[k]
                )));
            }
            let rdact = RdactParams::init(
                sc.groups,
                sc.rdact.embed,
                (sc.rdact.patch[0], sc.rdact.patch[1]),
                (sc.rdact.window[0], sc.rdact.window[1], sc.rdact.window[2]),
                sc.rdact.layer_pairs,
                config.heads,
                LayerVariant::DepthSpatial,
                &mut rng,
            )?;
            let rrt = sc
                .rrt
                .iter()
                .map(|rc| {
                    RrtParams::init(
                        sc.hypotheses,
                        rc.embed,
                        rc.patch,
                        rc.window,
                        rc.layer_pairs,
                        config.heads,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageParams {
                rdact,
                reduce: GroupReduceParams::mean_init(sc.groups),
                aggregate: SpatialWindowParams::grid3x3(channels[k], sc.groups)?,
                rrt,
            });
        }
        Ok(Model {
            config,
            features,
            stages,
        })
    }

    fn traverse<S: ParamSink>(&mut self, sink: &mut S) -> ModelVars {
        let features = visit_features(sink, "features", &mut self.features);
        let stages = self
            .stages
            .iter_mut()
            .enumerate()
            .map(|(k, st)| StageVars {
                rdact: visit_rdact(sink, &format!("stage{k}.rdact"), &mut st.rdact),
                reduce: visit_reduce(sink, &format!("stage{k}.reduce"), &mut st.reduce),
                aggregate: visit_aggregate(sink, &format!("stage{k}.aggregate"), &mut st.aggregate),
                rrt: st
                    .rrt
                    .iter_mut()
                    .enumerate()
                    .map(|(t, p)| visit_rrt(sink, &format!("stage{k}.iter{t}.rrt"), p))
                    .collect(),
            })
            .collect();
        ModelVars { features, stages }
    }

    /// Registers every parameter on `tape` and returns both the structured
    /// handles and the flat name→handle registry (canonical order).
    pub fn bind(&mut self, tape: &Tape) -> (ModelVars, Vec<(String, Var)>) {
        let mut sink = BindSink {
            tape,
            registry: Vec::new(),
        };
        let vars = self.traverse(&mut sink);
        (vars, sink.registry)
    }

    /// Clones every parameter, in canonical order.
    pub fn flatten(&mut self) -> Vec<(String, Tensor)> {
        let mut sink = FlattenSink { out: Vec::new() };
        self.traverse(&mut sink);
        sink.out
    }

    /// Overwrites every parameter from `updates`, which must be the canonical
    /// order (as produced by [`Model::flatten`]) with matching shapes.
    pub fn assign(&mut self, updates: Vec<Tensor>) -> Result<()> {
        let count = updates.len();
        let mut sink = AssignSink {
            src: updates.into_iter(),
            error: None,
        };
        self.traverse(&mut sink);
        if let Some(e) = sink.error {
            return Err(e);
        }
        if sink.src.next().is_some() {
            return Err(Error::arg(format!(
                "assignment carries more than the model's tensor count ({count} given)"
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&mut self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            entries: self.flatten(),
            config_text: self.config.to_toml()?,
        })
    }

    /// Rebuilds a model from a checkpoint: the embedded config drives
    /// construction, then every tensor is overwritten by name. Extra or
    /// missing entries are errors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let config = ModelConfig::from_toml(&ckpt.config_text)?;
        let mut model = Model::init(config, 0)?;
        let mut sink = LoadSink {
            map: ckpt.entries.iter().cloned().collect(),
            error: None,
        };
        model.traverse(&mut sink);
        if let Some(e) = sink.error {
            return Err(e);
        }
        if let Some(name) = sink.map.keys().next() {
            return Err(Error::Format(format!(
                "checkpoint entry {name} does not belong to this model"
            )));
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Geometry: per-stage dimensions and transformer contexts

pub struct StageGeometry {
    pub inv_scale: usize,
    /// `(H_k, W_k, D_k)`.
    pub dims: (usize, usize, usize),
    pub rdact: RdactContext,
    /// One context per iteration.
    pub rrt: Vec<RrtContext>,
}

/// Index plumbing for one input resolution: everything about a forward pass
/// that depends only on extents, not on parameter values.
pub struct ModelGeometry {
    pub input: (usize, usize),
    pub stages: Vec<StageGeometry>,
}

impl Model {
    pub fn geometry(&self, height: usize, width: usize) -> Result<ModelGeometry> {
        let count = self.config.stages.len();
        let mut stages = Vec::with_capacity(count);
        for (k, sc) in self.config.stages.iter().enumerate() {
            let inv_scale = 1usize << (count - 1 - k);
            let dims = (
                height.div_ceil(inv_scale),
                width.div_ceil(inv_scale),
                sc.hypotheses,
            );
            let rdact = RdactContext::new(dims, &self.stages[k].rdact)?;
            let rrt = self.stages[k]
                .rrt
                .iter()
                .map(|p| RrtContext::new(dims, p))
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageGeometry {
                inv_scale,
                dims,
                rdact,
                rrt,
            });
        }
        Ok(ModelGeometry {
            input: (height, width),
            stages,
        })
    }
}

// ---------------------------------------------------------------------------
// Forward pass

/// Depth maps (and losses, when requested) of one pass.
pub struct Forward {
    /// Finest-stage, last-iteration depth `[H, W]`.
    pub depth: Var,
    /// Per (stage, iteration) regressed depth at stage resolution.
    pub stage_depths: Vec<Vec<Var>>,
    /// Present when the pass was run with losses.
    pub losses: Option<LossTerms>,
}

/// Nearest-neighbor row map taking a `[sh, sw]` grid to `[th, tw]`.
fn nearest_map(sh: usize, sw: usize, th: usize, tw: usize) -> Vec<i64> {
    let mut map = Vec::with_capacity(th * tw);
    for ty in 0..th {
        let sy = (ty * sh / th).min(sh - 1);
        for tx in 0..tw {
            let sx = (tx * sw / tw).min(sw - 1);
            map.push((sy * sw + sx) as i64);
        }
    }
    map
}

/// Frozen per-pixel view weights: softmax across views of each view's mean
/// correlation (over hypotheses and groups). Computed once at the coarsest
/// stage and reused everywhere, detached from the graph.
fn frozen_view_weights(tape: &Tape, volumes: &[CostVolume]) -> Tensor {
    let mut per_view: Vec<Vec<f32>> = Vec::with_capacity(volumes.len());
    let mut dims = (0usize, 0usize);
    for v in volumes {
        let t = tape.value(v.cost);
        let s = t.shape();
        dims = (s[0], s[1]);
        let dg = s[2] * s[3];
        per_view.push(
            t.data()
                .chunks_exact(dg)
                .map(|c| c.iter().sum::<f32>() / dg as f32)
                .collect(),
        );
    }
    let (h, w) = dims;
    let n = per_view.len();
    let mut out = Tensor::zeros(&[n, h, w]);
    for p in 0..h * w {
        let m = per_view
            .iter()
            .map(|v| v[p])
            .fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = per_view.iter().map(|v| (v[p] - m).exp()).collect();
        let z: f32 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            out.data_mut()[i * h * w + p] = e / z;
        }
    }
    out
}

/// The frozen weights resampled to another stage's grid.
fn resample_view_weights(base: &Tensor, th: usize, tw: usize) -> Tensor {
    let (n, sh, sw) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let map = nearest_map(sh, sw, th, tw);
    Tensor::from_fn(&[n, th, tw], |i| {
        let (view, p) = (i / (th * tw), i % (th * tw));
        base.data()[view * sh * sw + map[p] as usize]
    })
}

/// Ground truth at stage resolution (center-tap convention: small pixel `i`
/// sits on full-resolution pixel `i·inv_scale`), inverted for the loss.
fn stage_inverse_gt(gt: &Tensor, inv_scale: usize, h: usize, w: usize) -> Tensor {
    let full_w = gt.shape()[1];
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        1.0 / gt.data()[y * inv_scale * full_w + x * inv_scale]
    })
}

pub fn forward(
    tape: &Tape,
    model: &Model,
    vars: &ModelVars,
    geo: &ModelGeometry,
    scene: &SyntheticScene,
    ablate: bool,
    with_loss: bool,
) -> Result<Forward> {
    let (height, width) = geo.input;
    if scene.reference.height() != height || scene.reference.width() != width {
        return Err(Error::shape(format!(
            "geometry was built for {height}x{width}, scene is {}x{}",
            scene.reference.height(),
            scene.reference.width()
        )));
    }
    if scene.sources.len() != model.config.views {
        return Err(Error::arg(format!(
            "model consumes {} source views, scene has {}",
            model.config.views,
            scene.sources.len()
        )));
    }

    let ref_maps = extract_features(
        tape,
        tape.constant(scene.reference.features.clone()),
        &vars.features,
    )?;
    let src_maps: Vec<Vec<Var>> = scene
        .sources
        .iter()
        .map(|v| extract_features(tape, tape.constant(v.features.clone()), &vars.features))
        .collect::<Result<_>>()?;

    let (d_min, d_max) = (scene.depth_range.0 as f64, scene.depth_range.1 as f64);
    let span = 1.0 / d_min - 1.0 / d_max;
    let mut width_inv = span;

    let mut view_weights: Option<Tensor> = None;
    let mut carried: Option<(Var, (usize, usize))> = None;
    let mut stage_depths: Vec<Vec<Var>> = Vec::new();
    let mut stage_losses: Vec<Vec<Var>> = Vec::new();

    for (k, sg) in geo.stages.iter().enumerate() {
        let (h, w, d_count) = sg.dims;
        let ref_f = ref_maps[k];
        {
            let fs = tape.shape_of(ref_f);
            if fs[0] != h || fs[1] != w {
                return Err(Error::shape(format!(
                    "stage {k}: features are {fs:?}, geometry wants ({h}, {w})"
                )));
            }
        }
        let ref_k = scale_intrinsics(&scene.reference.k, sg.inv_scale);
        let rigs = scene
            .sources
            .iter()
            .map(|s| {
                let scaled = s.at_scale(sg.inv_scale, Tensor::zeros(&[h, w, 1]))?;
                WarpRig::new(&ref_k, &scaled)
            })
            .collect::<Result<Vec<_>>>()?;
        let gt_inv = with_loss.then(|| {
            (
                stage_inverse_gt(&scene.gt_depth, sg.inv_scale, h, w),
                Tensor::ones(&[h, w]),
            )
        });

        let mut iter_depth: Option<Var> = None;
        let mut depths_here = Vec::with_capacity(sg.rrt.len());
        let mut losses_here = Vec::with_capacity(sg.rrt.len());
        let stage_vars = &vars.stages[k];
        let stage_params = &model.stages[k];

        for it in 0..sg.rrt.len() {
            // Hypotheses [h, w, D]: a shared inverse-depth grid to start,
            // then per-pixel bands re-centered on the latest regression.
            let hyps = match (&iter_depth, &carried) {
                (Some(depth), _) => {
                    refine_hypotheses(tape, *depth, d_min, d_max, width_inv, d_count)?
                }
                (None, Some((prev, (ph, pw)))) => {
                    let up = tape.gather_rows(
                        *prev,
                        1,
                        Rc::new(nearest_map(*ph, *pw, h, w)),
                        &[h, w],
                    )?;
                    refine_hypotheses(tape, up, d_min, d_max, width_inv, d_count)?
                }
                (None, None) => {
                    let grid =
                        generate_hypotheses(d_min, d_max, d_count, HypothesisSpacing::InverseDepth)?;
                    let flat = tape.constant(grid);
                    let map: Vec<i64> = (0..h * w).flat_map(|_| 0..d_count as i64).collect();
                    tape.gather_rows(flat, 1, Rc::new(map), &[h, w, d_count])?
                }
            };

            let volumes = rigs
                .iter()
                .zip(&src_maps)
                .map(|(rig, maps)| {
                    let warped = warp_feature_volume(tape, maps[k], hyps, rig, (h, w))?;
                    groupwise_correlation(
                        tape,
                        ref_f,
                        warped.features,
                        &warped.valid,
                        model.config.stages[k].groups,
                    )
                })
                .collect::<Result<Vec<_>>>()?;

            let weights = match &view_weights {
                Some(base) => resample_view_weights(base, h, w),
                None => {
                    let base = frozen_view_weights(tape, &volumes);
                    view_weights.get_or_insert(base).clone()
                }
            };
            let fused = fuse_views(tape, &volumes, tape.constant(weights))?;
            // Canonicalize −0.0 so the zero-initialized residual branches are
            // bit-transparent: x + 0.0 then preserves every payload exactly.
            let c0 = CostVolume {
                cost: tape.add_scalar(fused.cost, 0.0)?,
                channels: fused.channels,
            };

            let transformed = if ablate {
                c0
            } else {
                rdact_forward(tape, &c0, &stage_vars.rdact, &sg.rdact)?
            };
            let reduced = reduce_groups(tape, &transformed, &stage_vars.reduce)?;
            let aggregated = adaptive_spatial_aggregate(
                tape,
                &reduced,
                &stage_params.aggregate,
                &stage_vars.aggregate,
                ref_f,
                hyps,
            )?;
            let regressed = if ablate {
                aggregated
            } else {
                rrt_forward(tape, &aggregated, &stage_vars.rrt[it], &sg.rrt[it])?
            };
            let depth = soft_argmin(tape, &regressed, hyps)?;

            if let Some((gt, mask)) = &gt_inv {
                let pred_inv = tape.recip(depth)?;
                losses_here.push(stage_loss(tape, pred_inv, gt, mask)?);
            }
            depths_here.push(depth);
            iter_depth = Some(depth);
            width_inv /= 2.0;
        }
        carried = Some((iter_depth.expect("≥1 iteration per stage"), (h, w)));
        stage_depths.push(depths_here);
        stage_losses.push(losses_here);
    }

    Ok(Forward {
        depth: carried.expect("≥1 stage").0,
        stage_depths,
        losses: with_loss.then_some(LossTerms {
            per_stage: stage_losses,
            l_ref: 0.0,
        }),
    })
}

// ---------------------------------------------------------------------------
// Training

/// Adaptive-moment gradient descent with bias correction.
struct Adam {
    lr: f32,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(lr: f32, shapes: &[(String, Tensor)]) -> Adam {
        Adam {
            lr,
            step: 0,
            m: shapes.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One update over the flattened parameters; `grads[i]` of `None` means
    /// the tensor was unused this step (its moments still decay).
    fn update(&mut self, params: &mut [(String, Tensor)], grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i].as_ref().map_or(0.0, |t| t.data()[j]);
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g;
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g * g;
                pd[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f32,
    /// Train with the transformer stacks disabled (zero-init residuals never
    /// fire); parameters of the disabled stacks keep their initialization.
    pub ablate: bool,
}

impl TrainOptions {
    pub fn from_config(config: &ModelConfig) -> TrainOptions {
        TrainOptions {
            steps: config.train.steps,
            learning_rate: config.train.learning_rate,
            ablate: false,
        }
    }
}

pub struct TrainReport {
    /// Total loss per step, before that step's update.
    pub loss_trace: Vec<f32>,
}

/// Full-batch training: step `t` descends the loss of scene `t % scenes`.
/// Deterministic given the model (its init seed) and the scene list.
pub fn train(
    model: &mut Model,
    scenes: &[SyntheticScene],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if scenes.is_empty() {
        return Err(Error::arg("training needs at least one scene"));
    }
    let mut geos: HashMap<(usize, usize), ModelGeometry> = HashMap::new();
    for scene in scenes {
        let key = (scene.reference.height(), scene.reference.width());
        if !geos.contains_key(&key) {
            geos.insert(key, model.geometry(key.0, key.1)?);
        }
    }
    let mut flat = model.flatten();
    let mut adam = Adam::new(opts.learning_rate, &flat);
    let mut trace = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let scene = &scenes[step % scenes.len()];
        let geo = &geos[&(scene.reference.height(), scene.reference.width())];
        let tape = Tape::new();
        let (vars, registry) = model.bind(&tape);
        let out = forward(&tape, model, &vars, geo, scene, opts.ablate, true)?;
        let terms = out.losses.expect("forward ran with losses");
        let total = total_loss(&tape, &terms)?;
        let loss = tape.value(total).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "loss {loss} at step {step} (of {})",
                opts.steps
            )));
        }
        trace.push(loss);

        let grads = tape.backward(total)?;
        let per_tensor: Vec<Option<Tensor>> = registry
            .iter()
            .map(|(_, var)| grads.wrt(*var).cloned())
            .collect();
        adam.update(&mut flat, &per_tensor);
        for (name, t) in &flat {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "parameter {name} left the finite range at step {step}"
                )));
            }
        }
        model.assign(flat.iter().map(|(_, t)| t.clone()).collect())?;
    }
    Ok(TrainReport { loss_trace: trace })
}

pub struct Evaluation {
    /// Mean absolute inverse-depth error against ground truth.
    pub mae_inverse_depth: f32,
    /// Regressed full-resolution depth map.
    pub depth: Tensor,
}

/// Runs inference on one scene and scores it against the ground truth.
pub fn evaluate(model: &mut Model, scene: &SyntheticScene, ablate: bool) -> Result<Evaluation> {
    let geo = model.geometry(scene.reference.height(), scene.reference.width())?;
    let tape = Tape::new();
    let (vars, _) = model.bind(&tape);
    let out = forward(&tape, model, &vars, &geo, scene, ablate, false)?;
    let depth = tape.value(out.depth).clone();
    let gt = &scene.gt_depth;
    if depth.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            depth.shape(),
            gt.shape()
        )));
    }
    let mae = depth
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (1.0 / p - 1.0 / g).abs() as f64)
        .sum::<f64>()
        / depth.len() as f64;
    Ok(Evaluation {
        mae_inverse_depth: mae as f32,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RdactConfig, RrtConfig, StageConfig, TrainConfig};
    use crate::geometry::{CameraView, Mat3, Vec3};
    use crate::synthetic::{generate_scene, SceneConfig};
    use std::collections::HashSet;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            views: 2,
            heads: 2,
            stages: vec![StageConfig {
                iterations: 2,
                hypotheses: 4,
                groups: 4,
                rdact: RdactConfig {
                    layer_pairs: 1,
                    embed: 4,
                    patch: [2, 2],
                    window: [3, 3, 2],
                },
                rrt: vec![
                    RrtConfig {
                        embed: 4,
                        window: 4,
                        patch: 1,
                        layer_pairs: 1,
                    };
                    2
                ],
            }],
            train: TrainConfig {
                learning_rate: 1e-3,
                steps: 2,
            },
        }
    }

    fn tiny_scene() -> SyntheticScene {
        generate_scene(&SceneConfig {
            height: 16,
            width: 16,
            views: 2,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn registry_names_are_unique_and_stable_across_views() {
        let mut model = Model::init(ModelConfig::default(), 1).unwrap();
        let flat = model.flatten();
        let names: HashSet<&str> = flat.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.len(), flat.len(), "duplicate parameter names");

        let tape = Tape::new();
        let (_, registry) = model.bind(&tape);
        assert_eq!(registry.len(), flat.len());
        for ((fname, tensor), (bname, var)) in flat.iter().zip(&registry) {
            assert_eq!(fname, bname);
            assert_eq!(tape.value(*var).shape(), tensor.shape());
        }
    }

    #[test]
    fn assignment_follows_the_canonical_order() {
        let mut model = Model::init(tiny_config(), 3).unwrap();
        let doubled: Vec<Tensor> = model
            .flatten()
            .into_iter()
            .map(|(_, t)| Tensor::from_fn(t.shape(), |i| t.data()[i] * 2.0 + 0.125))
            .collect();
        model.assign(doubled.clone()).unwrap();
        for ((_, now), want) in model.flatten().iter().zip(&doubled) {
            assert_eq!(now.data(), want.data());
        }

        // Wrong count and wrong shape both fail loudly.
        assert!(model.assign(vec![Tensor::zeros(&[1])]).is_err());
        let mut too_many: Vec<Tensor> = model.flatten().into_iter().map(|(_, t)| t).collect();
        too_many.push(Tensor::zeros(&[1]));
        assert!(model.assign(too_many).is_err());
    }

    #[test]
    fn checkpoints_rebuild_the_exact_model() {
        let mut model = Model::init(tiny_config(), 5).unwrap();
        let ckpt = model.to_checkpoint().unwrap();
        let mut back = Model::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.config, model.config);
        for ((na, ta), (nb, tb)) in model.flatten().iter().zip(back.flatten().iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na} changed across the round trip");
        }

        let mut extra = ckpt.clone();
        extra.entries.push(("stowaway".into(), Tensor::zeros(&[1])));
        assert!(Model::from_checkpoint(&extra).is_err());
        let mut short = ckpt.clone();
        short.entries.pop();
        assert!(Model::from_checkpoint(&short).is_err());
    }

    #[test]
    fn full_and_ablated_pipelines_agree_at_zero_init() {
        let mut model = Model::init(tiny_config(), 7).unwrap();
        let scene = tiny_scene();
        let geo = model.geometry(16, 16).unwrap();
        let tape = Tape::new();
        let (vars, _) = model.bind(&tape);
        let full = forward(&tape, &model, &vars, &geo, &scene, false, true).unwrap();
        let ablated = forward(&tape, &model, &vars, &geo, &scene, true, true).unwrap();
        let bits = |v: Var| -> Vec<u32> {
            tape.value(v).data().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(full.depth), bits(ablated.depth));
        let (fl, al) = (full.losses.unwrap(), ablated.losses.unwrap());
        for (a, b) in fl.per_stage.iter().flatten().zip(al.per_stage.iter().flatten()) {
            assert_eq!(bits(*a), bits(*b));
        }
    }

    #[test]
    fn identity_rig_with_one_hypothesis_regresses_that_hypothesis() {
        let mut cfg = tiny_config();
        cfg.stages[0].iterations = 1;
        cfg.stages[0].hypotheses = 1;
        cfg.stages[0].rrt.pop();
        let mut model = Model::init(cfg, 9).unwrap();
        let mut scene = tiny_scene();
        let identity = CameraView::new(
            scene.reference.k,
            Mat3::rotation_xyz(0.0, 0.0, 0.0),
            Vec3([0.0, 0.0, 0.0]),
            scene.reference.features.clone(),
        )
        .unwrap();
        scene.sources = vec![identity.clone(), identity];

        let geo = model.geometry(16, 16).unwrap();
        let tape = Tape::new();
        let (vars, _) = model.bind(&tape);
        let out = forward(&tape, &model, &vars, &geo, &scene, false, false).unwrap();
        let grid = generate_hypotheses(2.0, 6.0, 1, HypothesisSpacing::InverseDepth).unwrap();
        let want = grid.data()[0];
        for &d in tape.value(out.depth).data() {
            assert!((d - want).abs() < 1e-6, "depth {d} vs single hypothesis {want}");
        }
    }

    #[test]
    fn zero_steps_keep_the_initialization() {
        let mut model = Model::init(tiny_config(), 11).unwrap();
        let before = model.flatten();
        let report = train(
            &mut model,
            &[tiny_scene()],
            &TrainOptions {
                steps: 0,
                learning_rate: 1e-3,
                ablate: false,
            },
        )
        .unwrap();
        assert!(report.loss_trace.is_empty());
        for ((_, a), (_, b)) in before.iter().zip(model.flatten().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zero_learning_rate_freezes_the_loss_trace() {
        let mut model = Model::init(tiny_config(), 13).unwrap();
        let report = train(
            &mut model,
            &[tiny_scene()],
            &TrainOptions {
                steps: 3,
                learning_rate: 0.0,
                ablate: false,
            },
        )
        .unwrap();
        assert_eq!(report.loss_trace.len(), 3);
        assert_eq!(report.loss_trace[0].to_bits(), report.loss_trace[1].to_bits());
        assert_eq!(report.loss_trace[0].to_bits(), report.loss_trace[2].to_bits());
    }

    #[test]
    fn identical_seeds_train_identically() {
        let scenes = [tiny_scene()];
        let opts = TrainOptions {
            steps: 2,
            learning_rate: 1e-3,
            ablate: false,
        };
        let run = || {
            let mut model = Model::init(tiny_config(), 21).unwrap();
            let report = train(&mut model, &scenes, &opts).unwrap();
            (report.loss_trace, model.flatten())
        };
        let (trace_a, params_a) = run();
        let (trace_b, params_b) = run();
        let bits = |t: &[f32]| -> Vec<u32> { t.iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&trace_a), bits(&trace_b));
        for ((na, ta), (_, tb)) in params_a.iter().zip(&params_b) {
            assert_eq!(
                bits(ta.data()),
                bits(tb.data()),
                "{na} differs between identical runs"
            );
        }
        // And training actually moved the parameters off their initialization.
        let mut fresh = Model::init(tiny_config(), 21).unwrap();
        let moved = fresh
            .flatten()
            .iter()
            .zip(&params_a)
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert!(moved, "two optimizer steps changed nothing");
    }

    #[test]
    fn runaway_learning_rates_abort_with_a_diagnostic() {
        let mut model = Model::init(tiny_config(), 17).unwrap();
        let result = train(
            &mut model,
            &[tiny_scene()],
            &TrainOptions {
                steps: 3,
                learning_rate: f32::INFINITY,
                ablate: false,
            },
        );
        assert!(result.is_err());
    }

    #[test]
    fn evaluation_scores_a_sane_initial_model() {
        let mut model = Model::init(tiny_config(), 19).unwrap();
        let scene = tiny_scene();
        let eval = evaluate(&mut model, &scene, false).unwrap();
        assert_eq!(eval.depth.shape(), scene.gt_depth.shape());
        assert!(eval.mae_inverse_depth.is_finite());
        // Depths stay inside the search range.
        for &d in eval.depth.data() {
            assert!((2.0..=6.0).contains(&d));
        }
        // The untrained error cannot beat the best constant predictor by
        // magic, but it must be far below the worst case (range width).
        assert!(eval.mae_inverse_depth < (1.0 / 2.0 - 1.0 / 6.0));
    }
}
