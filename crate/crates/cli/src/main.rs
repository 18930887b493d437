//! Command-line front end: synthetic scene generation, training, inference,
//! gradient spot-checks, the attention scaling benchmark, and a smoke test.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mvscost::bench::{attention_scaling, to_csv, BenchConfig};
use mvscost::checkpoint::{load_checkpoint, save_checkpoint};
use mvscost::config::ModelConfig;
use mvscost::pfm::write_pfm;
use mvscost::pipeline::{evaluate, forward, train, Model, TrainOptions};
use mvscost::synthetic::{generate_scene, load_scene, save_scene, SceneConfig, SyntheticScene};
use mvscost::{Error, Result, Tensor};

/// Writes to stdout, exiting quietly when the consumer has closed the pipe —
/// `mvscost --print-config | head` must not panic mid-schema.
fn emit(text: std::fmt::Arguments) {
    use std::io::Write;
    if std::io::stdout().write_fmt(text).is_err() {
        std::process::exit(0);
    }
}

macro_rules! say {
    ($($arg:tt)*) => {{
        crate::emit(format_args!($($arg)*));
        crate::emit(format_args!("\n"));
    }};
}

#[derive(Parser)]
#[command(
    name = "mvscost",
    version,
    about = "Multi-view stereo depth regression with windowed-transformer cost aggregation",
    arg_required_else_help = true
)]
struct Cli {
    /// Print the configuration schema with its default values as TOML, then exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view scene into a directory.
    Synth(SynthArgs),
    /// Train a model on one or more scene directories.
    Train(TrainArgs),
    /// Regress a depth map for a scene using a trained checkpoint.
    Infer(InferArgs),
    /// Spot-check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time windowed versus global attention across growing volumes.
    Bench(BenchArgs),
    /// Run a quick end-to-end functional smoke test.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to create the scene in.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Number of source views (the reference view is extra).
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 2.0)]
    depth_min: f32,
    #[arg(long, default_value_t = 6.0)]
    depth_max: f32,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory; repeat the flag to train on several scenes round-robin.
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    /// Model/training configuration (TOML). Defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the checkpoint and the loss trace.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Override the configured optimizer step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the configured learning rate.
    #[arg(long)]
    learning_rate: Option<f32>,
    /// Train with the transformer stacks disabled (backbone only).
    #[arg(long)]
    ablate: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Scene directory to regress depth for.
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the regressed depth map.
    #[arg(long)]
    out: PathBuf,
    /// Run with the transformer stacks disabled.
    #[arg(long)]
    ablate: bool,
    /// Also write a 16-bit grayscale PNG preview (near = bright).
    #[arg(long)]
    preview: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Linear spatial extents to measure, e.g. 32,48,64,96,128.
    #[arg(long, value_delimiter = ',', default_values_t = vec![32, 48, 64, 96, 128])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    embed: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Window extents as height,width,depth.
    #[arg(long, value_delimiter = ',', default_values_t = vec![7, 7, 2])]
    window: Vec<usize>,
    #[arg(long, default_value_t = 0x5EED)]
    seed: u64,
    /// Structured report file (TOML); the measurement table goes to stdout.
    #[arg(long, default_value = "bench_report.toml")]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_config {
        print_config()?;
        return Ok(());
    }
    match cli.command.expect("arg_required_else_help guarantees a command") {
        Command::Synth(args) => synth(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => infer(args),
        Command::Gradcheck(args) => gradcheck::run(args.seed),
        Command::Bench(args) => bench(args),
        Command::Selftest(args) => selftest(args.seed),
    }
}

fn print_config() -> Result<()> {
    say!(
        "\
# Model and training configuration. `views` counts source views (the
# reference is extra); `heads` is the attention head count everywhere.
#
# Each [[stages]] entry is one resolution level, coarsest first; the finest
# stage runs at full input resolution and each coarser one at half the next.
#   iterations  depth re-centering passes at this stage
#   hypotheses  depth hypotheses per pixel
#   groups      correlation groups (must divide the stage's feature channels)
#   rdact       grouped-cost transformer: layer_pairs, embedding dim,
#               token patch [h, w], attention window [h, w, depth]
#   rrt         one entry per iteration: single-channel cost transformer
#               (embedding dim, square window, patch, layer_pairs)
#
# [train] sets the optimizer: adaptive-moment descent for `steps` steps.
"
    );
    emit(format_args!("{}", ModelConfig::default_toml()));
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let scene = generate_scene(&SceneConfig {
        height: args.height,
        width: args.width,
        views: args.views,
        depth_range: (args.depth_min, args.depth_max),
        seed: args.seed,
    })?;
    fs::create_dir_all(&args.out)?;
    save_scene(&args.out, &scene)?;
    say!(
        "wrote {}x{} scene with {} source views to {}",
        args.height,
        args.width,
        args.views,
        args.out.display()
    );
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(ModelConfig::default()),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    if let Some(lr) = args.learning_rate {
        config.train.learning_rate = lr;
    }
    let scenes: Vec<SyntheticScene> = args
        .scene
        .iter()
        .map(|d| load_scene(d))
        .collect::<Result<_>>()?;
    for (scene, dir) in scenes.iter().zip(&args.scene) {
        if scene.sources.len() != config.views {
            return Err(Error::InvalidArgument(format!(
                "{} has {} source views, config wants {}",
                dir.display(),
                scene.sources.len(),
                config.views
            )));
        }
    }

    let opts = TrainOptions {
        steps: config.train.steps,
        learning_rate: config.train.learning_rate,
        ablate: args.ablate,
    };
    let mut model = Model::init(config, args.seed)?;
    let started = Instant::now();
    let report = train(&mut model, &scenes, &opts)?;
    let elapsed = started.elapsed();

    fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.bin");
    save_checkpoint(&ckpt_path, &model.to_checkpoint()?)?;
    let mut trace = String::from("step,loss\n");
    for (i, loss) in report.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{loss}\n"));
    }
    fs::write(args.out.join("loss_trace.csv"), trace)?;

    match (report.loss_trace.first(), report.loss_trace.last()) {
        (Some(first), Some(last)) => say!(
            "trained {} steps in {:.1?}: loss {first:.6} -> {last:.6}",
            report.loss_trace.len(),
            elapsed
        ),
        _ => say!("trained 0 steps (checkpoint is the initialization)"),
    }
    say!("wrote {}", ckpt_path.display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let mut model = Model::from_checkpoint(&load_checkpoint(&args.checkpoint)?)?;
    let scene = load_scene(&args.scene)?;
    let started = Instant::now();
    let eval = evaluate(&mut model, &scene, args.ablate)?;
    let elapsed = started.elapsed();
    fs::create_dir_all(&args.out)?;
    let depth_path = args.out.join("depth.pfm");
    write_pfm(&depth_path, &eval.depth)?;
    if args.preview {
        write_preview(
            &args.out.join("depth_preview.png"),
            &eval.depth,
            scene.depth_range,
        )?;
    }
    say!(
        "regressed {}x{} depth in {:.1?}; mean abs inverse-depth error {:.6}",
        eval.depth.shape()[0],
        eval.depth.shape()[1],
        elapsed,
        eval.mae_inverse_depth
    );
    say!("wrote {}", depth_path.display());
    Ok(())
}

/// 16-bit grayscale preview of a depth map, bright = near, scaled so the
/// scene's full depth range spans the full code range.
fn write_preview(path: &Path, depth: &Tensor, (d_min, d_max): (f32, f32)) -> Result<()> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (inv_near, inv_far) = (1.0 / d_min, 1.0 / d_max);
    let codes: Vec<u16> = depth
        .data()
        .iter()
        .map(|&d| {
            let t = ((1.0 / d - inv_far) / (inv_near - inv_far)).clamp(0.0, 1.0);
            (t * f32::from(u16::MAX)).round() as u16
        })
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, codes)
        .expect("buffer sized to the image");
    img.save(path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

fn bench(args: BenchArgs) -> Result<()> {
    if args.window.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "--window takes exactly three extents (height,width,depth), got {}",
            args.window.len()
        )));
    }
    let report = attention_scaling(&BenchConfig {
        sizes: args.sizes,
        depth: args.depth,
        embed: args.embed,
        heads: args.heads,
        window: (args.window[0], args.window[1], args.window[2]),
        seed: args.seed,
    })?;
    emit(format_args!("{}", to_csv(&report)));
    eprintln!(
        "fitted exponents (time vs linear size): windowed {:.2}, global {:.2}; \
         volume-sized window vs global within {:.1}%",
        report.windowed_exponent,
        report.global_exponent,
        report.coincidence_delta * 100.0
    );
    let text = toml::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("serializing bench report: {e}")))?;
    fs::write(&args.out, text)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

mod gradcheck {
    use mvscost::cost_volume::{AggregatedCost, CostVolume};
    use mvscost::geometry::{generate_hypotheses, HypothesisSpacing};
    use mvscost::gradcheck::check_output_sum_grad;
    use mvscost::ops::LinearParams;
    use mvscost::rdact::{rdact_forward, LayerVariant, RdactContext, RdactParams};
    use mvscost::regression::soft_argmin;
    use mvscost::rrt::{rrt_forward, RrtContext, RrtParams};
    use mvscost::{Result, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-3;
    const REL_TOL: f64 = 1e-3;

    /// Zero-initialized projections make residual blocks start as identities;
    /// for a gradient check that is too easy, so give them small values.
    fn wake(layer: &mut LinearParams, rng: &mut ChaCha8Rng) {
        let filled = Tensor::from_fn(layer.weight.shape(), |_| rng.gen_range(-0.1..0.1));
        layer.weight = filled;
    }

    pub fn run(seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = 0usize;
        let mut check = |name: &str, report: Result<mvscost::gradcheck::GradCheckReport>| {
            match report {
                Ok(r) if r.within(REL_TOL) => {
                    say!(
                        "gradcheck {name}: ok (max rel err {:.2e} over {} elements)",
                        r.max_rel_error, r.num_elements
                    )
                }
                Ok(r) => {
                    say!("gradcheck {name}: FAILED (max rel err {:.2e})", r.max_rel_error);
                    failures += 1;
                }
                Err(e) => {
                    say!("gradcheck {name}: FAILED ({e})");
                    failures += 1;
                }
            }
        };

        let x = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.83 + 0.2).sin());
        check(
            "gelu·mul",
            check_output_sum_grad(|t, x| t.mul(t.gelu(x)?, x), &x, EPS),
        );

        let weights = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.31).cos());
        check(
            "softmax",
            check_output_sum_grad(
                move |t, x| {
                    let w = t.constant(weights.clone());
                    t.mul(t.softmax(x, 1)?, w)
                },
                &x,
                EPS,
            ),
        );

        let weights = Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.47).cos());
        check(
            "layer_norm",
            check_output_sum_grad(
                move |t, x| {
                    let gamma = t.leaf(Tensor::from_fn(&[4], |i| 1.0 + 0.1 * i as f32));
                    let beta = t.leaf(Tensor::zeros(&[4]));
                    let w = t.constant(weights.clone());
                    t.mul(t.layer_norm(x, gamma, beta, 1)?, w)
                },
                &x,
                EPS,
            ),
        );

        let proj = LinearParams::uniform_fan_in(4, 3, &mut rng);
        check(
            "linear",
            check_output_sum_grad(
                move |t, x| {
                    let vars = proj.bind(t);
                    t.linear(x, vars)
                },
                &x,
                EPS,
            ),
        );

        let positive = Tensor::from_fn(&[6], |i| 2.0 + 0.3 * i as f32);
        check(
            "recip",
            check_output_sum_grad(|t, x| t.recip(x), &positive, EPS),
        );

        // Values kept away from ±1, where the quadratic flank hands over.
        let spread = Tensor::new(vec![5], vec![-2.4, -0.6, 0.1, 0.7, 3.1])?;
        check(
            "smooth_l1",
            check_output_sum_grad(|t, x| t.smooth_l1(x), &spread, EPS),
        );

        // Composed grouped-cost transformer, gradient through the whole stack.
        let (h, w, d, groups) = (4, 4, 2, 4);
        let mut params = RdactParams::init(
            groups,
            4,
            (2, 2),
            (2, 2, 2),
            1,
            2,
            LayerVariant::DepthSpatial,
            &mut rng,
        )?;
        wake(&mut params.rec, &mut rng);
        for (regular, shifted) in params.layers.iter_mut() {
            wake(&mut regular.spatial_attn.output, &mut rng);
            wake(&mut shifted.spatial_attn.output, &mut rng);
            if let Some((_, attn)) = regular.depth.as_mut() {
                wake(&mut attn.output, &mut rng);
            }
            if let Some((_, attn)) = shifted.depth.as_mut() {
                wake(&mut attn.output, &mut rng);
            }
        }
        let ctx = RdactContext::new((h, w, d), &params)?;
        let cost = Tensor::from_fn(&[h, w, d, groups], |i| (i as f32 * 0.59 + 1.0).sin());
        check(
            "rdact_forward",
            check_output_sum_grad(
                move |t, x| {
                    let vars = params.bind(t);
                    let c = CostVolume {
                        cost: x,
                        channels: groups,
                    };
                    Ok(rdact_forward(t, &c, &vars, &ctx)?.cost)
                },
                &cost,
                EPS,
            ),
        );

        // Composed single-channel transformer plus depth regression.
        let mut params = RrtParams::init(d, 4, 1, 4, 1, 2, &mut rng)?;
        wake(&mut params.rer, &mut rng);
        for (regular, shifted) in params.layers.iter_mut() {
            wake(&mut regular.spatial_attn.output, &mut rng);
            wake(&mut shifted.spatial_attn.output, &mut rng);
        }
        let ctx = RrtContext::new((h, w, d), &params)?;
        // Hypotheses near depth 1 keep the regressed output at unit scale, so
        // the f32 forward's rounding stays well under the secant resolution.
        let hyps = generate_hypotheses(0.8, 1.6, d, HypothesisSpacing::InverseDepth)?;
        let cost = Tensor::from_fn(&[h, w, d], |i| (i as f32 * 0.71).sin());
        check(
            "rrt_forward·soft_argmin",
            check_output_sum_grad(
                move |t, x| {
                    let vars = params.bind(t);
                    let refined = rrt_forward(t, &AggregatedCost { cost: x }, &vars, &ctx)?;
                    soft_argmin(t, &refined, t.constant(hyps.clone()))
                },
                &cost,
                EPS,
            ),
        );

        if failures > 0 {
            return Err(mvscost::Error::NonFinite(format!(
                "{failures} gradient check(s) failed"
            )));
        }
        say!("gradcheck: all checks passed");
        Ok(())
    }
}

fn selftest(seed: u64) -> Result<()> {
    use mvscost::geometry::{generate_hypotheses, CameraView, HypothesisSpacing, Mat3, Vec3};
    use mvscost::Tape;

    let mut step = 0usize;
    let mut ok = |what: &str| {
        step += 1;
        say!("selftest {step}: ok — {what}");
    };

    let tiny = tiny_selftest_config();
    let text = tiny.to_toml()?;
    if ModelConfig::from_toml(&text)? != tiny {
        return Err(Error::Config("config TOML round trip drifted".into()));
    }
    ok("config validates and round-trips through TOML");

    let scene = generate_scene(&SceneConfig {
        height: 16,
        width: 16,
        views: 2,
        depth_range: (2.0, 6.0),
        seed,
    })?;
    let dir = tempfile::tempdir()?;
    save_scene(dir.path(), &scene)?;
    let loaded = load_scene(dir.path())?;
    if loaded.gt_depth.data() != scene.gt_depth.data() {
        return Err(Error::Format("scene round trip changed ground truth".into()));
    }
    ok("16x16 synthetic scene renders and round-trips through disk");

    let mut model = Model::init(tiny.clone(), seed)?;
    let geo = model.geometry(16, 16)?;
    let tape = Tape::new();
    let (vars, _) = model.bind(&tape);
    let full = forward(&tape, &model, &vars, &geo, &scene, false, false)?;
    let ablated = forward(&tape, &model, &vars, &geo, &scene, true, false)?;
    let full_bits: Vec<u32> = tape.value(full.depth).data().iter().map(|v| v.to_bits()).collect();
    let abl_bits: Vec<u32> = tape
        .value(ablated.depth)
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    if full_bits != abl_bits {
        return Err(Error::NonFinite(
            "zero-initialized transformers changed the backbone output".into(),
        ));
    }
    drop(tape);
    ok("transformer stacks are exact identities at initialization");

    let report = train(
        &mut model,
        std::slice::from_ref(&scene),
        &TrainOptions {
            steps: 2,
            learning_rate: 1e-3,
            ablate: false,
        },
    )?;
    if report.loss_trace.len() != 2 || report.loss_trace.iter().any(|l| !l.is_finite()) {
        return Err(Error::Diverged("short training run misbehaved".into()));
    }
    ok("two optimizer steps run with finite losses");

    let ckpt_path = dir.path().join("selftest_checkpoint.bin");
    save_checkpoint(&ckpt_path, &model.to_checkpoint()?)?;
    let mut reloaded = Model::from_checkpoint(&load_checkpoint(&ckpt_path)?)?;
    let same = model
        .flatten()
        .iter()
        .zip(reloaded.flatten().iter())
        .all(|((_, a), (_, b))| {
            a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits()))
        });
    if !same {
        return Err(Error::Format("checkpoint round trip lost bits".into()));
    }
    ok("checkpoint round trip is bit-exact");

    let mae = evaluate(&mut reloaded, &scene, false)?.mae_inverse_depth;
    if !mae.is_finite() {
        return Err(Error::NonFinite("evaluation produced a non-finite error".into()));
    }
    ok("trained model evaluates against ground truth");

    let mut one_cfg = tiny;
    one_cfg.stages[0].iterations = 1;
    one_cfg.stages[0].hypotheses = 1;
    one_cfg.stages[0].rrt.truncate(1);
    let mut one = Model::init(one_cfg, seed)?;
    let mut static_scene = generate_scene(&SceneConfig {
        height: 16,
        width: 16,
        views: 2,
        depth_range: (2.0, 6.0),
        seed,
    })?;
    let still = CameraView::new(
        static_scene.reference.k,
        Mat3::rotation_xyz(0.0, 0.0, 0.0),
        Vec3([0.0, 0.0, 0.0]),
        static_scene.reference.features.clone(),
    )?;
    static_scene.sources = vec![still.clone(), still];
    let geo = one.geometry(16, 16)?;
    let tape = Tape::new();
    let (vars, _) = one.bind(&tape);
    let out = forward(&tape, &one, &vars, &geo, &static_scene, false, false)?;
    let want = generate_hypotheses(2.0, 6.0, 1, HypothesisSpacing::InverseDepth)?.data()[0];
    if tape
        .value(out.depth)
        .data()
        .iter()
        .any(|&v| (v - want).abs() > 1e-6)
    {
        return Err(Error::NonFinite(
            "single-hypothesis identity rig did not regress the hypothesis".into(),
        ));
    }
    drop(tape);
    ok("identity rig with one hypothesis regresses exactly that depth");

    let bench = attention_scaling(&BenchConfig {
        sizes: vec![8, 12],
        depth: 2,
        embed: 8,
        heads: 2,
        window: (3, 3, 2),
        seed,
    })?;
    if bench.measurements.len() != 2
        || bench
            .measurements
            .iter()
            .any(|m| m.windowed_seconds <= 0.0 || m.global_seconds <= 0.0)
    {
        return Err(Error::NonFinite("toy attention benchmark misbehaved".into()));
    }
    ok("attention benchmark runs at toy sizes");

    say!("selftest: all {step} checks passed");
    Ok(())
}

/// One coarse stage, two iterations — small enough that the whole selftest
/// stays under a minute on one core.
fn tiny_selftest_config() -> ModelConfig {
    let mut config = ModelConfig::default();
    config.stages.truncate(1);
    let stage = &mut config.stages[0];
    stage.iterations = 2;
    stage.hypotheses = 4;
    stage.groups = 4;
    stage.rdact.layer_pairs = 1;
    stage.rdact.embed = 4;
    stage.rdact.patch = [2, 2];
    stage.rdact.window = [3, 3, 2];
    stage.rrt.truncate(2);
    for rrt in &mut stage.rrt {
        rrt.embed = 4;
        rrt.window = 4;
        rrt.patch = 1;
        rrt.layer_pairs = 1;
    }
    config.train.steps = 2;
    config
}
