//! Double-precision reference implementations shared by the integration
//! suites. Each oracle recomputes its quantity from first principles — plain
//! loops, f64 throughout — so agreement with the f32 tape kernels is evidence
//! about the kernels, not about shared code.

#![allow(dead_code)]

use mvscost::attention::AttentionParams;
use mvscost::cost_volume::SpatialWindowParams;
use mvscost::geometry::{Mat3, Vec3};
use mvscost::ops::LinearParams;
use mvscost::Tensor;

use rand::Rng;

/// Fills a zero-initialized layer with small random values so residual
/// branches participate in the quantity under test.
pub fn wake(layer: &mut LinearParams, amp: f32, rng: &mut impl Rng) {
    for v in layer.weight.data_mut() {
        *v = rng.gen_range(-amp..amp);
    }
    if let Some(b) = &mut layer.bias {
        for v in b.data_mut() {
            *v = rng.gen_range(-amp..amp);
        }
    }
}

/// `x · W (+ b)` in f64 for a `[rows, fan_in]` slice and a `[fan_in, fan_out]`
/// weight.
fn linear_f64(x: &[f64], rows: usize, layer: &LinearParams) -> Vec<f64> {
    let fan_in = layer.weight.shape()[0];
    let fan_out = layer.weight.shape()[1];
    let w = layer.weight.data();
    let mut out = vec![0.0f64; rows * fan_out];
    for r in 0..rows {
        for o in 0..fan_out {
            let mut acc = match &layer.bias {
                Some(b) => b.data()[o] as f64,
                None => 0.0,
            };
            for i in 0..fan_in {
                acc += x[r * fan_in + i] * w[i * fan_out + o] as f64;
            }
            out[r * fan_out + o] = acc;
        }
    }
    out
}

fn softmax_row_f64(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Multi-head windowed attention, recomputed naively: per group of `tokens`
/// rows, `softmax(QKᵀ/√dh + bias + mask)·V` head by head, then the output
/// projection. `tokens` is `[B, T, E]`, `pair_bins` maps each ordered pair to
/// a row of the `[bins, heads]` bias table, `mask` is the additive `[B, T, T]`
/// tensor (0 or a large negative number).
pub fn naive_attention(
    tokens: &Tensor,
    p: &AttentionParams,
    pair_bins: &[i64],
    mask: Option<&Tensor>,
) -> Vec<f64> {
    let (b, t, e) = (
        tokens.shape()[0],
        tokens.shape()[1],
        tokens.shape()[2],
    );
    assert_eq!(pair_bins.len(), t * t, "one bin per ordered token pair");
    let heads = p.heads;
    let dh = e / heads;
    let table = p.bias_table.data();

    let mut out = vec![0.0f64; b * t * e];
    for g in 0..b {
        let x: Vec<f64> = tokens.data()[g * t * e..(g + 1) * t * e]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let q = linear_f64(&x, t, &p.query);
        let k = linear_f64(&x, t, &p.key);
        let v = linear_f64(&x, t, &p.value);

        let mut merged = vec![0.0f64; t * e];
        for h in 0..heads {
            let col = |m: &[f64], tok: usize, c: usize| m[tok * e + h * dh + c];
            for a in 0..t {
                let mut scores = vec![0.0f64; t];
                for bb in 0..t {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += col(&q, a, c) * col(&k, bb, c);
                    }
                    let mut s = dot / (dh as f64).sqrt();
                    s += table[pair_bins[a * t + bb] as usize * heads + h] as f64;
                    if let Some(m) = mask {
                        s += m.data()[(g * t + a) * t + bb] as f64;
                    }
                    scores[bb] = s;
                }
                softmax_row_f64(&mut scores);
                for c in 0..dh {
                    let mut acc = 0.0;
                    for bb in 0..t {
                        acc += scores[bb] * col(&v, bb, c);
                    }
                    merged[a * e + h * dh + c] = acc;
                }
            }
        }
        let projected = linear_f64(&merged, t, &p.output);
        out[g * t * e..(g + 1) * t * e].copy_from_slice(&projected);
    }
    out
}

/// Group-wise correlation, one loop per definition: entry `(p, j, g)` is
/// `(G/C) · Σ_{c in group g} f0[p,c] · warped[p,j,c]`, zeroed where the warp
/// was invalid.
pub fn correlation_oracle(
    f0: &Tensor,
    warped: &Tensor,
    valid: &Tensor,
    groups: usize,
) -> Vec<f64> {
    let (h, w, c) = (f0.shape()[0], f0.shape()[1], f0.shape()[2]);
    let d = warped.shape()[2];
    let per = c / groups;
    let mut out = vec![0.0f64; h * w * d * groups];
    for p in 0..h * w {
        for j in 0..d {
            for g in 0..groups {
                let mut acc = 0.0f64;
                for cc in g * per..(g + 1) * per {
                    acc += f0.data()[p * c + cc] as f64
                        * warped.data()[(p * d + j) * c + cc] as f64;
                }
                out[(p * d + j) * groups + g] =
                    acc * groups as f64 / c as f64 * valid.data()[p * d + j] as f64;
            }
        }
    }
    out
}

/// Bilinear read of `map` (`[H, W, C]`) at `(x, y)`; points outside the pixel
/// rectangle read zero and are flagged invalid, matching the sampler.
pub fn bilinear_f64(map: &Tensor, x: f64, y: f64) -> (Vec<f64>, bool) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return (vec![0.0; c], false);
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |yy: usize, xx: usize, cc: usize| map.data()[(yy * w + xx) * c + cc] as f64;
    let out = (0..c)
        .map(|cc| {
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0, cc) + fx * at(y0, x1, cc))
                + fy * ((1.0 - fx) * at(y1, x0, cc) + fx * at(y1, x1, cc))
        })
        .collect();
    (out, true)
}

/// Adaptive spatial aggregation recomputed in f64: per pixel, sample the cost
/// at the offset grid, weight each sample by feature similarity times
/// inverse-depth similarity, and normalize; positions whose samples all
/// missed keep their own cost.
pub fn aggregation_oracle(
    cost: &Tensor,
    f0: &Tensor,
    hyps: &Tensor,
    params: &SpatialWindowParams,
) -> Vec<f64> {
    let (h, w, d) = (cost.shape()[0], cost.shape()[1], cost.shape()[2]);
    let c = f0.shape()[2];
    let k = params.samples();
    let groups = params.groups;
    let per = c / groups;

    let inv_hyps = Tensor::from_fn(hyps.shape(), |i| 1.0 / hyps.data()[i]);
    let f0_f64: Vec<f64> = f0.data().iter().map(|&v| v as f64).collect();
    let offsets = linear_f64(&f0_f64, h * w, &params.offset_net);

    let mut out = vec![0.0f64; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut numer = vec![0.0f64; d];
            let mut denom = vec![0.0f64; d];
            for (s, &(gx, gy)) in params.grid.iter().enumerate() {
                let sx = x as f64 + gx as f64 + offsets[p * 2 * k + 2 * s];
                let sy = y as f64 + gy as f64 + offsets[p * 2 * k + 2 * s + 1];
                let (cost_s, ok) = bilinear_f64(cost, sx, sy);
                let (f0_s, _) = bilinear_f64(f0, sx, sy);
                let (invd_s, _) = bilinear_f64(&inv_hyps, sx, sy);

                // Feature-similarity weight through the sigmoid head.
                let mut corr = vec![0.0f64; groups];
                for g in 0..groups {
                    let mut acc = 0.0;
                    for cc in g * per..(g + 1) * per {
                        acc += f0_s[cc] * f0.data()[p * c + cc] as f64;
                    }
                    corr[g] = acc * groups as f64 / c as f64;
                }
                let mut wk = corr;
                for (i, layer) in params.weight_net.iter().enumerate() {
                    if i > 0 {
                        for v in wk.iter_mut() {
                            // Exact GELU: x·Φ(x) with Φ the standard normal CDF.
                            *v *= 0.5 * (1.0 + libm::erf(*v / std::f64::consts::SQRT_2));
                        }
                    }
                    wk = linear_f64(&wk, 1, layer);
                }
                let wk = 1.0 / (1.0 + (-wk[0]).exp());

                let flag = if ok { 1.0 } else { 0.0 };
                for j in 0..d {
                    let dk = 1.0
                        / (1.0
                            + (invd_s[j] - inv_hyps.data()[p * d + j] as f64)
                                .abs()
                                .exp());
                    let u = wk * dk * flag;
                    numer[j] += u * cost_s[j];
                    denom[j] += u;
                }
            }
            for j in 0..d {
                out[p * d + j] = if denom[j] > 1e-8 {
                    numer[j] / denom[j]
                } else {
                    cost.data()[p * d + j] as f64
                };
            }
        }
    }
    out
}

/// Plane-sweep warp recomputed the long way: back-project the reference pixel
/// to depth `d`, move it into the source frame, and project. The reference
/// intrinsics are inverted in closed form for the upper-triangular case, not
/// via the general matrix inverse the kernel uses.
pub fn warp_oracle(
    p: (f64, f64),
    d: f64,
    ref_k: &Mat3,
    src_k: &Mat3,
    r: &Mat3,
    t: &Vec3,
) -> ((f64, f64), f64) {
    let k = &ref_k.0;
    let (fx, skew, cx, fy, cy) = (k[0], k[1], k[2], k[4], k[5]);
    // Closed-form inverse of [[fx, skew, cx], [0, fy, cy], [0, 0, 1]].
    let yn = (p.1 - cy) / fy;
    let xn = (p.0 - cx - skew * yn) / fx;
    let point = Vec3([xn * d, yn * d, d]);
    let moved = r.mul_vec(&point).add(t);
    let proj = src_k.mul_vec(&moved);
    ((proj.0[0] / proj.0[2], proj.0[1] / proj.0[2]), proj.0[2])
}

/// Largest |f32 − f64| over a kernel output and its oracle.
pub fn max_abs_diff(actual: &[f32], oracle: &[f64]) -> f64 {
    assert_eq!(actual.len(), oracle.len(), "output length mismatch");
    actual
        .iter()
        .zip(oracle)
        .map(|(&a, &o)| (a as f64 - o).abs())
        .fold(0.0, f64::max)
}
