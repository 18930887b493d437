//! Camera model, plane-sweep warping, and depth hypothesis handling.
//!
//! All camera algebra runs in f64: the warp maps every reference pixel through
//! `K_i (R (K_0^{-1} p d) + t)`, and at desk image sizes f32 intermediate
//! products would already cost a noticeable fraction of a pixel. Feature
//! values stay f32; only coordinates are double precision.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-major 3×3 matrix in double precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [f64; 9]);

/// 3-vector companion to [`Mat3`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3(pub [f64; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// Pinhole intrinsics with square or anamorphic focal lengths.
    pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat3 {
        Mat3([fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0])
    }

    /// Rotation composed as Rz(rz)·Ry(ry)·Rx(rx), angles in radians.
    pub fn rotation_xyz(rx: f64, ry: f64, rz: f64) -> Mat3 {
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let rx = Mat3([1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx]);
        let ry = Mat3([cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy]);
        let rz = Mat3([cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0]);
        rz.mul(&ry).mul(&rx)
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let a = &self.0;
        let b = &o.0;
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] =
                    a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
            }
        }
        Mat3(out)
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let a = &self.0;
        Vec3([
            a[0] * v.0[0] + a[1] * v.0[1] + a[2] * v.0[2],
            a[3] * v.0[0] + a[4] * v.0[1] + a[5] * v.0[2],
            a[6] * v.0[0] + a[7] * v.0[1] + a[8] * v.0[2],
        ])
    }

    pub fn transpose(&self) -> Mat3 {
        let a = &self.0;
        Mat3([a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]])
    }

    pub fn det(&self) -> f64 {
        let a = &self.0;
        a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
            + a[2] * (a[3] * a[7] - a[4] * a[6])
    }

    /// Closed-form adjugate inverse; singular matrices are an error.
    pub fn inverse(&self) -> Result<Mat3> {
        let d = self.det();
        if d.abs() < 1e-12 {
            return Err(Error::arg(format!("singular 3x3 matrix (det {d:.3e})")));
        }
        let a = &self.0;
        let inv_d = 1.0 / d;
        Ok(Mat3([
            (a[4] * a[8] - a[5] * a[7]) * inv_d,
            (a[2] * a[7] - a[1] * a[8]) * inv_d,
            (a[1] * a[5] - a[2] * a[4]) * inv_d,
            (a[5] * a[6] - a[3] * a[8]) * inv_d,
            (a[0] * a[8] - a[2] * a[6]) * inv_d,
            (a[2] * a[3] - a[0] * a[5]) * inv_d,
            (a[3] * a[7] - a[4] * a[6]) * inv_d,
            (a[1] * a[6] - a[0] * a[7]) * inv_d,
            (a[0] * a[4] - a[1] * a[3]) * inv_d,
        ]))
    }

    fn is_rotation(&self) -> bool {
        let should_be_identity = self.mul(&self.transpose());
        let max_dev = should_be_identity
            .0
            .iter()
            .zip(&Mat3::IDENTITY.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        max_dev <= 1e-5 && (self.det() - 1.0).abs() <= 1e-5
    }

    fn is_intrinsics(&self) -> bool {
        let a = &self.0;
        let upper_triangular = a[3] == 0.0 && a[6] == 0.0 && a[7] == 0.0;
        upper_triangular && a[0] > 0.0 && a[4] > 0.0 && (a[8] - 1.0).abs() <= 1e-9
    }
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn add(&self, o: &Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn dot(&self, o: &Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }
}

/// One calibrated view: intrinsics, the rigid transform taking reference-frame
/// points into this view's frame, and this view's feature map `[H, W, C]`.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub features: Tensor,
}

impl CameraView {
    /// Validates the calibration: `r` must be a proper rotation (orthonormal,
    /// det +1, within 1e-5) and `k` upper-triangular with positive focals.
    pub fn new(k: Mat3, r: Mat3, t: Vec3, features: Tensor) -> Result<CameraView> {
        if !k.is_intrinsics() {
            return Err(Error::arg(
                "intrinsics must be upper-triangular with positive focal lengths",
            ));
        }
        if !r.is_rotation() {
            return Err(Error::arg(
                "extrinsic rotation must be orthonormal with det +1 (1e-5)",
            ));
        }
        if features.rank() != 3 {
            return Err(Error::shape(format!(
                "view features want [H, W, C], got {:?}",
                features.shape()
            )));
        }
        Ok(CameraView { k, r, t, features })
    }

    /// Same calibration with a different (e.g. per-stage) feature map, with
    /// intrinsics rescaled to that map's resolution.
    pub fn at_scale(&self, inv_scale: usize, features: Tensor) -> Result<CameraView> {
        CameraView::new(scale_intrinsics(&self.k, inv_scale), self.r, self.t, features)
    }

    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Intrinsics for a feature map downsampled by `inv_scale` (pixel `i` of the
/// small map sits on pixel `i * inv_scale` of the original, matching
/// stride-`inv_scale` convolutions whose center tap lands on even pixels).
pub fn scale_intrinsics(k: &Mat3, inv_scale: usize) -> Mat3 {
    let s = 1.0 / inv_scale as f64;
    let a = &k.0;
    Mat3([a[0] * s, a[1] * s, a[2] * s, 0.0, a[4] * s, a[5] * s, 0.0, 0.0, 1.0])
}

/// Precomputed plane-sweep map from reference pixels to one source view:
/// `h(p, d) = M p̃ d + b` with `M = K_i R K_0⁻¹` and `b = K_i t`, followed by
/// dehomogenization.
#[derive(Clone, Copy, Debug)]
pub struct WarpRig {
    m: Mat3,
    b: Vec3,
    src_w: usize,
    src_h: usize,
}

/// Dehomogenization guard: smaller projected depths mark the sample invalid
/// rather than dividing by almost-zero.
const MIN_PROJECTED_DEPTH: f64 = 1e-9;

impl WarpRig {
    pub fn new(ref_k: &Mat3, src: &CameraView) -> Result<WarpRig> {
        Ok(WarpRig {
            m: src.k.mul(&src.r).mul(&ref_k.inverse()?),
            b: src.k.mul_vec(&src.t),
            src_w: src.width(),
            src_h: src.height(),
        })
    }

    /// Continuous source-image position of reference pixel `p` at depth `d`,
    /// plus whether the sample may be used (projected depth above the guard
    /// and position inside the source image).
    pub fn warp(&self, p: (f64, f64), d: f64) -> ((f64, f64), bool) {
        let dir = self.m.mul_vec(&Vec3([p.0, p.1, 1.0]));
        let h = dir.scale(d).add(&self.b);
        if h.0[2] <= MIN_PROJECTED_DEPTH {
            return ((0.0, 0.0), false);
        }
        let x = h.0[0] / h.0[2];
        let y = h.0[1] / h.0[2];
        let valid =
            x >= 0.0 && y >= 0.0 && x <= (self.src_w - 1) as f64 && y <= (self.src_h - 1) as f64;
        ((x, y), valid)
    }
}

/// One-pixel form of the sweep, built directly from the camera pair.
pub fn warp_pixel(
    p: (f64, f64),
    d: f64,
    ref_k: &Mat3,
    src: &CameraView,
) -> Result<((f64, f64), bool)> {
    Ok(WarpRig::new(ref_k, src)?.warp(p, d))
}

/// How [`generate_hypotheses`] spaces its depth samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HypothesisSpacing {
    /// Uniform in depth.
    Linear,
    /// Uniform in 1/depth — near depths get denser coverage, the natural
    /// spacing for plane sweeps.
    InverseDepth,
}

/// `count` strictly increasing depths covering `[d_min, d_max]`, endpoints
/// included; a single sample collapses to the interval midpoint (linear) or
/// the inverse-depth midpoint.
pub fn generate_hypotheses(
    d_min: f64,
    d_max: f64,
    count: usize,
    spacing: HypothesisSpacing,
) -> Result<Tensor> {
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::arg(format!(
            "depth range wants 0 < d_min < d_max, got [{d_min}, {d_max}]"
        )));
    }
    if count == 0 {
        return Err(Error::arg("hypothesis count must be at least 1"));
    }
    let values: Vec<f32> = match (count, spacing) {
        (1, HypothesisSpacing::Linear) => vec![((d_min + d_max) / 2.0) as f32],
        (1, HypothesisSpacing::InverseDepth) => {
            vec![(2.0 / (1.0 / d_min + 1.0 / d_max)) as f32]
        }
        (n, HypothesisSpacing::Linear) => (0..n)
            .map(|j| (d_min + (d_max - d_min) * j as f64 / (n - 1) as f64) as f32)
            .collect(),
        (n, HypothesisSpacing::InverseDepth) => {
            let (inv_hi, inv_lo) = (1.0 / d_min, 1.0 / d_max);
            // Walk inverse depth from far to near end so depths come out
            // increasing.
            (0..n)
                .map(|j| {
                    let inv = inv_hi + (inv_lo - inv_hi) * j as f64 / (n - 1) as f64;
                    (1.0 / inv) as f32
                })
                .collect()
        }
    };
    Tensor::new(vec![count], values)
}

/// Differentiable re-centering of per-pixel hypotheses around a regressed
/// depth map: a window of `width_inv` in inverse-depth units, clamped so the
/// whole window stays inside `[d_min, d_max]`, sampled at `count` points per
/// pixel (increasing in depth). Gradients flow into `depth`, which is what
/// lets later iterations train the earlier regression.
pub fn refine_hypotheses(
    tape: &Tape,
    depth: Var,
    d_min: f64,
    d_max: f64,
    width_inv: f64,
    count: usize,
) -> Result<Var> {
    if count == 0 {
        return Err(Error::arg("hypothesis count must be at least 1"));
    }
    let span = 1.0 / d_min - 1.0 / d_max;
    if !(width_inv > 0.0 && width_inv <= span) {
        return Err(Error::arg(format!(
            "inverse-depth window {width_inv} outside (0, {span}]"
        )));
    }
    let (h, w) = {
        let v = tape.value(depth);
        if v.rank() != 2 {
            return Err(Error::shape(format!(
                "refine_hypotheses wants a [H, W] depth map, got {:?}",
                v.shape()
            )));
        }
        (v.shape()[0], v.shape()[1])
    };
    let inv = tape.recip(tape.clamp(depth, d_min as f32, d_max as f32)?)?;
    let half = width_inv / 2.0;
    let center = tape.clamp(
        inv,
        (1.0 / d_max + half) as f32,
        (1.0 / d_min - half) as f32,
    )?;
    // Offsets descend so that the resulting depths ascend.
    let offsets = tape.constant(Tensor::from_fn(&[count], |j| {
        if count == 1 {
            0.0
        } else {
            (half - width_inv * j as f64 / (count - 1) as f64) as f32
        }
    }));
    let tiled = {
        let map: Vec<i64> = (0..h * w).flat_map(|p| std::iter::repeat(p as i64).take(count)).collect();
        tape.gather_rows(center, 1, std::rc::Rc::new(map), &[h, w, count])?
    };
    let inv_grid = tape.add_broadcast(tiled, offsets)?;
    tape.recip(inv_grid)
}

/// The feature volume produced by sweeping one source view across the depth
/// hypotheses, and the per-sample validity (1 inside the source image, 0
/// where the projection left it — those samples read zero).
pub struct WarpedVolume {
    pub features: Var,
    pub valid: Tensor,
}

/// Warps `src_features` (`[Hs, Ws, C]`, registered on the tape so extractor
/// gradients flow) to the reference grid `[H, W]` at each hypothesis depth.
/// `hyps` is either shared `[D]` or per-pixel `[H, W, D]`. Differentiable in
/// both the features (bilinear corner weights) and the depths (chain through
/// the projective division and the sampling position).
pub fn warp_feature_volume(
    tape: &Tape,
    src_features: Var,
    hyps: Var,
    rig: &WarpRig,
    ref_size: (usize, usize),
) -> Result<WarpedVolume> {
    tape.check(src_features)?;
    tape.check(hyps)?;
    let (h, w) = ref_size;
    let (d_count, per_pixel, c, sh, sw) = {
        let f = tape.value(src_features);
        let hv = tape.value(hyps);
        if f.rank() != 3 {
            return Err(Error::shape(format!(
                "source features want [H, W, C], got {:?}",
                f.shape()
            )));
        }
        let (d_count, per_pixel) = match hv.rank() {
            1 => (hv.shape()[0], false),
            3 if hv.shape()[0] == h && hv.shape()[1] == w => (hv.shape()[2], true),
            _ => {
                return Err(Error::shape(format!(
                    "hypotheses want [D] or [{h}, {w}, D], got {:?}",
                    hv.shape()
                )))
            }
        };
        if hv.data().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::arg(
                "depth hypotheses must be strictly positive and finite",
            ));
        }
        (d_count, per_pixel, f.shape()[2], f.shape()[0], f.shape()[1])
    };
    if rig.src_h != sh || rig.src_w != sw {
        return Err(Error::shape(format!(
            "rig was built for a {}x{} source, features are {sh}x{sw}",
            rig.src_h, rig.src_w
        )));
    }

    let mut valid = Tensor::zeros(&[h, w, d_count]);
    let out = {
        let f = tape.value(src_features);
        let hv = tape.value(hyps);
        let (fd, hd) = (f.data(), hv.data());
        let mut out = Tensor::zeros(&[h, w, d_count, c]);
        let rig = *rig;
        let vd = valid.data_mut();
        // The valid mask is filled in a separate sequential pass so the
        // parallel one writes only its own rows of `out`.
        for p in 0..h * w {
            let (px, py) = ((p % w) as f64, (p / w) as f64);
            for j in 0..d_count {
                let d = hd[if per_pixel { p * d_count + j } else { j }] as f64;
                let (_, ok) = rig.warp((px, py), d);
                if ok {
                    vd[p * d_count + j] = 1.0;
                }
            }
        }
        parallel::for_each_chunk_mut(out.data_mut(), d_count * c, |p, rows| {
            let (px, py) = ((p % w) as f64, (p / w) as f64);
            for (j, orow) in rows.chunks_exact_mut(c).enumerate() {
                let d = hd[if per_pixel { p * d_count + j } else { j }] as f64;
                let ((x, y), ok) = rig.warp((px, py), d);
                if !ok {
                    continue;
                }
                let x0 = (x.floor() as usize).min(sw - 1);
                let y0 = (y.floor() as usize).min(sh - 1);
                let x1 = (x0 + 1).min(sw - 1);
                let y1 = (y0 + 1).min(sh - 1);
                let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
                let r00 = &fd[(y0 * sw + x0) * c..][..c];
                let r10 = &fd[(y0 * sw + x1) * c..][..c];
                let r01 = &fd[(y1 * sw + x0) * c..][..c];
                let r11 = &fd[(y1 * sw + x1) * c..][..c];
                let (w00, w10) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy));
                let (w01, w11) = ((1.0 - fx) * fy, fx * fy);
                for (k, o) in orow.iter_mut().enumerate() {
                    *o = w00 * r00[k] + w10 * r10[k] + w01 * r01[k] + w11 * r11[k];
                }
            }
        });
        out
    };

    let rig = *rig;
    let features = tape.push(
        out,
        vec![src_features, hyps],
        Box::new(move |args| {
            let f = args.parents[0];
            let hv = args.parents[1];
            let g = args.grad.data();
            let (fd, hd) = (f.data(), hv.data());

            let mut dfeat = args.needs[0].then(|| Tensor::zeros(f.shape()));
            let mut dhyp = args.needs[1].then(|| Tensor::zeros(hv.shape()));
            if dfeat.is_none() && dhyp.is_none() {
                return vec![None, None];
            }
            // Both gradients scatter into shared rows (feature texels, or a
            // shared [D] hypothesis vector), so the sweep is sequential.
            for p in 0..h * w {
                let (px, py) = ((p % w) as f64, (p / w) as f64);
                // Projection direction for this pixel; reused for the depth
                // derivative of the dehomogenized position.
                let dir = rig.m.mul_vec(&Vec3([px, py, 1.0]));
                for j in 0..d_count {
                    let hidx = if per_pixel { p * d_count + j } else { j };
                    let d = hd[hidx] as f64;
                    let hom = dir.scale(d).add(&rig.b);
                    if hom.0[2] <= MIN_PROJECTED_DEPTH {
                        continue;
                    }
                    let x = hom.0[0] / hom.0[2];
                    let y = hom.0[1] / hom.0[2];
                    if !(x >= 0.0
                        && y >= 0.0
                        && x <= (sw - 1) as f64
                        && y <= (sh - 1) as f64)
                    {
                        continue;
                    }
                    let x0 = (x.floor() as usize).min(sw - 1);
                    let y0 = (y.floor() as usize).min(sh - 1);
                    let x1 = (x0 + 1).min(sw - 1);
                    let y1 = (y0 + 1).min(sh - 1);
                    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
                    let grow = &g[(p * d_count + j) * c..][..c];
                    if let Some(df) = dfeat.as_mut() {
                        let dm = df.data_mut();
                        let (w00, w10) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy));
                        let (w01, w11) = ((1.0 - fx) * fy, fx * fy);
                        for (k, gv) in grow.iter().enumerate() {
                            dm[(y0 * sw + x0) * c + k] += w00 * gv;
                            dm[(y0 * sw + x1) * c + k] += w10 * gv;
                            dm[(y1 * sw + x0) * c + k] += w01 * gv;
                            dm[(y1 * sw + x1) * c + k] += w11 * gv;
                        }
                    }
                    if let Some(dh) = dhyp.as_mut() {
                        // d(x,y)/dd via the quotient rule on (dir·d + b).
                        let z2 = hom.0[2] * hom.0[2];
                        let dx_dd = (dir.0[0] * hom.0[2] - hom.0[0] * dir.0[2]) / z2;
                        let dy_dd = (dir.0[1] * hom.0[2] - hom.0[1] * dir.0[2]) / z2;
                        let r00 = &fd[(y0 * sw + x0) * c..][..c];
                        let r10 = &fd[(y0 * sw + x1) * c..][..c];
                        let r01 = &fd[(y1 * sw + x0) * c..][..c];
                        let r11 = &fd[(y1 * sw + x1) * c..][..c];
                        let mut gx = 0.0f64;
                        let mut gy = 0.0f64;
                        for (k, gv) in grow.iter().enumerate() {
                            let ddx =
                                (1.0 - fy) * (r10[k] - r00[k]) + fy * (r11[k] - r01[k]);
                            let ddy =
                                (1.0 - fx) * (r01[k] - r00[k]) + fx * (r11[k] - r10[k]);
                            gx += (*gv * ddx) as f64;
                            gy += (*gv * ddy) as f64;
                        }
                        dh.data_mut()[hidx] += (gx * dx_dd + gy * dy_dd) as f32;
                    }
                }
            }
            vec![dfeat, dhyp]
        }),
    );
    Ok(WarpedVolume { features, valid })
}
