//! Windowed-versus-global attention scaling measurements.
//!
//! The production transformers only attend within fixed windows, which keeps
//! their cost linear in pixel count; attending globally would be quadratic.
//! This module quantifies that difference: it times one self-contained
//! multi-head attention kernel over growing volumes, once partitioned into
//! fixed windows and once globally, then fits the growth exponent of wall
//! time in the linear spatial dimension (windowed attention should come out
//! near 2, global near 4).
//!
//! The kernel is raw `f32`, single-threaded, and streams scores one query row
//! at a time — a global pass over a 128×128×2 volume visits ~10⁹ query–key
//! pairs, so nothing quadratic is ever materialized. It deliberately bypasses
//! the autodiff tape: recording would allocate per-op buffers that swamp the
//! arithmetic being measured.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthetic::splitmix64;

/// What to measure: square spatial extents, a fixed depth extent, and the
/// attention geometry shared by every measurement.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Linear spatial extents; each volume is `size × size × depth` tokens.
    pub sizes: Vec<usize>,
    pub depth: usize,
    pub embed: usize,
    pub heads: usize,
    /// Window extents `(height, width, depth)` for the windowed passes.
    pub window: (usize, usize, usize),
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> BenchConfig {
        BenchConfig {
            sizes: vec![32, 48, 64, 96, 128],
            depth: 2,
            embed: 8,
            heads: 2,
            window: (7, 7, 2),
            seed: 0x5EED,
        }
    }
}

/// One volume size, measured both ways.
#[derive(Debug, Clone, Serialize)]
pub struct SizeMeasurement {
    pub size: usize,
    /// Tokens actually present (`size² · depth`).
    pub tokens: usize,
    /// Windows the windowed kernel processed.
    pub windows: usize,
    /// Tokens after padding to whole windows (`windows ·` window volume).
    pub padded_tokens: usize,
    pub windowed_seconds: f64,
    pub global_seconds: f64,
    /// High-water mark of the windowed kernel's buffers, in bytes.
    pub windowed_peak_bytes: usize,
    pub global_peak_bytes: usize,
    /// Sum of the windowed pass's outputs — a determinism witness and proof
    /// the timed work was not optimized away.
    pub checksum: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub depth: usize,
    pub embed: usize,
    pub heads: usize,
    pub window: (usize, usize, usize),
    /// Least-squares slope of `ln(time)` against `ln(size)` for the windowed
    /// passes; linear-in-pixel-count behavior shows up as ≈ 2.
    pub windowed_exponent: f64,
    /// Same fit for the global passes; quadratic behavior shows up as ≈ 4.
    pub global_exponent: f64,
    /// Relative wall-time gap between the windowed kernel configured with a
    /// volume-sized window and the dedicated global kernel, at the smallest
    /// size: the two run the same computation, so this bounds the windowed
    /// path's bookkeeping overhead.
    pub coincidence_delta: f64,
    pub measurements: Vec<SizeMeasurement>,
}

// ---------------------------------------------------------------------------
// The measured kernel

/// Per-head query/key/value projection weights, deterministic in the seed.
struct Projections {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    embed: usize,
    heads: usize,
}

fn uniform_fill(count: usize, seed: u64, bound: f32) -> Vec<f32> {
    (0..count)
        .map(|i| {
            let bits = splitmix64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let unit = (bits >> 40) as f32 / (1u64 << 24) as f32;
            (unit * 2.0 - 1.0) * bound
        })
        .collect()
}

impl Projections {
    fn seeded(embed: usize, heads: usize, seed: u64) -> Projections {
        let bound = (3.0 / embed as f32).sqrt();
        Projections {
            wq: uniform_fill(embed * embed, seed ^ 0x71, bound),
            wk: uniform_fill(embed * embed, seed ^ 0x4B, bound),
            wv: uniform_fill(embed * embed, seed ^ 0x56, bound),
            embed,
            heads,
        }
    }
}

/// `x [t, E] · w [E, E]`, written head-major as `out[head][token][E/heads]`.
fn project(x: &[f32], t: usize, w: &[f32], embed: usize, heads: usize, out: &mut Vec<f32>) {
    let dh = embed / heads;
    out.clear();
    out.resize(t * embed, 0.0);
    for i in 0..t {
        let xi = &x[i * embed..(i + 1) * embed];
        for h in 0..heads {
            for c in 0..dh {
                let col = h * dh + c;
                let mut acc = 0.0f32;
                for (e, &xv) in xi.iter().enumerate() {
                    acc += xv * w[e * embed + col];
                }
                out[(h * t + i) * dh + c] = acc;
            }
        }
    }
}

/// Softmax attention among `t` tokens for one head, one streamed score row at
/// a time. Results land in the head's slice of the `[t, embed]` output.
fn attend_head(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    t: usize,
    dh: usize,
    scores: &mut Vec<f32>,
    out: &mut [f32],
    embed: usize,
    head_offset: usize,
) {
    let scale = 1.0 / (dh as f32).sqrt();
    scores.clear();
    scores.resize(t, 0.0);
    for i in 0..t {
        let qi = &q[i * dh..(i + 1) * dh];
        let mut max = f32::NEG_INFINITY;
        for j in 0..t {
            let kj = &k[j * dh..(j + 1) * dh];
            let mut s = 0.0f32;
            for c in 0..dh {
                s += qi[c] * kj[c];
            }
            s *= scale;
            scores[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut z = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let inv = 1.0 / z;
        let row = &mut out[i * embed + head_offset..i * embed + head_offset + dh];
        row.fill(0.0);
        for j in 0..t {
            let weight = scores[j] * inv;
            let vj = &v[j * dh..(j + 1) * dh];
            for c in 0..dh {
                row[c] += weight * vj[c];
            }
        }
    }
}

struct PassOutput {
    out: Vec<f32>,
    windows: usize,
    peak_bytes: usize,
}

/// Attention within non-overlapping windows; partial windows are padded with
/// zero tokens. Output is `[window, token, embed]` in window-scan order.
fn windowed_pass(
    x: &[f32],
    dims: (usize, usize, usize),
    window: (usize, usize, usize),
    proj: &Projections,
) -> PassOutput {
    let (h, w, d) = dims;
    let (wy, wx, wd) = window;
    let (gy, gx, gd) = (h.div_ceil(wy), w.div_ceil(wx), d.div_ceil(wd));
    let t = wy * wx * wd;
    let (embed, heads) = (proj.embed, proj.heads);
    let dh = embed / heads;

    let mut xw = vec![0.0f32; t * embed];
    let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
    let mut scores = Vec::new();
    let mut out = vec![0.0f32; gy * gx * gd * t * embed];
    let mut windows = 0usize;

    for by in 0..gy {
        for bx in 0..gx {
            for bd in 0..gd {
                for ty in 0..wy {
                    for tx in 0..wx {
                        for td in 0..wd {
                            let (yy, xx, dd) = (by * wy + ty, bx * wx + tx, bd * wd + td);
                            let ti = (ty * wx + tx) * wd + td;
                            let dst = &mut xw[ti * embed..(ti + 1) * embed];
                            if yy < h && xx < w && dd < d {
                                let si = (yy * w + xx) * d + dd;
                                dst.copy_from_slice(&x[si * embed..(si + 1) * embed]);
                            } else {
                                dst.fill(0.0);
                            }
                        }
                    }
                }
                project(&xw, t, &proj.wq, embed, heads, &mut q);
                project(&xw, t, &proj.wk, embed, heads, &mut k);
                project(&xw, t, &proj.wv, embed, heads, &mut v);
                let wout = &mut out[windows * t * embed..(windows + 1) * t * embed];
                for head in 0..heads {
                    let span = head * t * dh..(head + 1) * t * dh;
                    attend_head(
                        &q[span.clone()],
                        &k[span.clone()],
                        &v[span],
                        t,
                        dh,
                        &mut scores,
                        wout,
                        embed,
                        head * dh,
                    );
                }
                windows += 1;
            }
        }
    }
    let peak_bytes = 4 * (x.len()
        + xw.len()
        + q.capacity()
        + k.capacity()
        + v.capacity()
        + scores.capacity()
        + out.len());
    PassOutput {
        out,
        windows,
        peak_bytes,
    }
}

/// Attention across all `tokens` at once (every query row still streams, so
/// the score matrix never exists in full).
fn global_pass(x: &[f32], tokens: usize, proj: &Projections) -> PassOutput {
    let (embed, heads) = (proj.embed, proj.heads);
    let dh = embed / heads;
    let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
    let mut scores = Vec::new();
    let mut out = vec![0.0f32; tokens * embed];
    project(x, tokens, &proj.wq, embed, heads, &mut q);
    project(x, tokens, &proj.wk, embed, heads, &mut k);
    project(x, tokens, &proj.wv, embed, heads, &mut v);
    for head in 0..heads {
        let span = head * tokens * dh..(head + 1) * tokens * dh;
        attend_head(
            &q[span.clone()],
            &k[span.clone()],
            &v[span],
            tokens,
            dh,
            &mut scores,
            &mut out,
            embed,
            head * dh,
        );
    }
    let peak_bytes = 4 * (x.len()
        + q.capacity()
        + k.capacity()
        + v.capacity()
        + scores.capacity()
        + out.len());
    PassOutput {
        out,
        windows: 1,
        peak_bytes,
    }
}

// ---------------------------------------------------------------------------
// Timing and fitting

/// Runs the pass once; if that took under half a second, reruns it enough
/// times to accumulate a stable median (first run discarded as warmup).
fn timed<F: FnMut() -> PassOutput>(mut f: F) -> (f64, PassOutput) {
    let start = Instant::now();
    let first = black_box(f());
    let cold = start.elapsed().as_secs_f64();
    if cold >= 0.5 {
        return (cold, first);
    }
    let reps = (((0.15 / cold.max(1e-9)).ceil() as usize).clamp(3, 9)) | 1;
    let mut times = Vec::with_capacity(reps);
    let mut last = first;
    for _ in 0..reps {
        let start = Instant::now();
        last = black_box(f());
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    (times[reps / 2], last)
}

/// Least-squares slope of `ln y` against `ln x`.
fn fit_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0.ln()).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in points {
        let dx = x.ln() - mean_x;
        num += dx * (y.ln() - mean_y);
        den += dx * dx;
    }
    num / den
}

/// Times windowed and global attention at every configured size and fits the
/// growth exponents.
pub fn attention_scaling(cfg: &BenchConfig) -> Result<ScalingReport> {
    if cfg.sizes.len() < 2 {
        return Err(Error::arg("exponent fits need at least two sizes"));
    }
    if cfg.depth == 0 || cfg.embed == 0 || cfg.sizes.iter().any(|&s| s == 0) {
        return Err(Error::arg("volume extents must be positive"));
    }
    if cfg.heads == 0 || cfg.embed % cfg.heads != 0 {
        return Err(Error::arg(format!(
            "{} heads must divide the embedding dim {}",
            cfg.heads, cfg.embed
        )));
    }
    let (wy, wx, wd) = cfg.window;
    if wy == 0 || wx == 0 || wd == 0 {
        return Err(Error::arg("window extents must be positive"));
    }

    let proj = Projections::seeded(cfg.embed, cfg.heads, cfg.seed);
    let mut measurements = Vec::with_capacity(cfg.sizes.len());
    for &size in &cfg.sizes {
        let tokens = size * size * cfg.depth;
        let x = uniform_fill(tokens * cfg.embed, cfg.seed ^ (size as u64) << 17, 1.0);
        let dims = (size, size, cfg.depth);
        let (windowed_seconds, wout) = timed(|| windowed_pass(&x, dims, cfg.window, &proj));
        let (global_seconds, gout) = timed(|| global_pass(&x, tokens, &proj));
        measurements.push(SizeMeasurement {
            size,
            tokens,
            windows: wout.windows,
            padded_tokens: wout.windows * wy * wx * wd,
            windowed_seconds,
            global_seconds,
            windowed_peak_bytes: wout.peak_bytes,
            global_peak_bytes: gout.peak_bytes,
            checksum: wout.out.iter().map(|&v| v as f64).sum(),
        });
    }

    let windowed_exponent = fit_exponent(
        &measurements
            .iter()
            .map(|m| (m.size as f64, m.windowed_seconds))
            .collect::<Vec<_>>(),
    );
    let global_exponent = fit_exponent(
        &measurements
            .iter()
            .map(|m| (m.size as f64, m.global_seconds))
            .collect::<Vec<_>>(),
    );

    // Coincidence probe: volume-sized window versus the global kernel, at the
    // smallest size. The two runs are interleaved rep by rep so that clock
    // drift on a busy host hits both medians equally.
    let probe_size = *cfg.sizes.iter().min().expect("at least two sizes");
    let tokens = probe_size * probe_size * cfg.depth;
    let x = uniform_fill(tokens * cfg.embed, cfg.seed ^ (probe_size as u64) << 17, 1.0);
    let dims = (probe_size, probe_size, cfg.depth);
    let reps = 7;
    let mut windowed_times = Vec::with_capacity(reps);
    let mut global_times = Vec::with_capacity(reps);
    black_box(windowed_pass(&x, dims, dims, &proj));
    black_box(global_pass(&x, tokens, &proj));
    for _ in 0..reps {
        let start = Instant::now();
        black_box(windowed_pass(&x, dims, dims, &proj));
        windowed_times.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        black_box(global_pass(&x, tokens, &proj));
        global_times.push(start.elapsed().as_secs_f64());
    }
    windowed_times.sort_by(f64::total_cmp);
    global_times.sort_by(f64::total_cmp);
    let coincidence_delta =
        (windowed_times[reps / 2] - global_times[reps / 2]).abs() / global_times[reps / 2];

    Ok(ScalingReport {
        depth: cfg.depth,
        embed: cfg.embed,
        heads: cfg.heads,
        window: cfg.window,
        windowed_exponent,
        global_exponent,
        coincidence_delta,
        measurements,
    })
}

/// The per-size measurements as CSV (header included).
pub fn to_csv(report: &ScalingReport) -> String {
    let mut s = String::from(
        "size,tokens,windows,padded_tokens,windowed_seconds,global_seconds,\
         windowed_peak_bytes,global_peak_bytes,checksum\n",
    );
    for m in &report.measurements {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{},{},{:.6}\n",
            m.size,
            m.tokens,
            m.windows,
            m.padded_tokens,
            m.windowed_seconds,
            m.global_seconds,
            m.windowed_peak_bytes,
            m.global_peak_bytes,
            m.checksum
        ));
    }
    s
}
