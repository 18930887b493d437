//! Procedural multi-view scenes with exact ground-truth depth.
//!
//! The world is a single slanted plane carrying a multi-octave value-noise
//! texture. Every view is rendered by intersecting its pixel rays with the
//! plane analytically, so ground truth is exact by construction and all views
//! are photo-consistent up to resampling. Source cameras sit at small
//! baselines with a couple of degrees of rotation, looking at the same plane
//! patch.
//!
//! A scene round-trips through a directory: images and ground truth as PFM,
//! cameras as plain-text matrices, ranges in a small TOML file.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Mat3, Vec3};
use crate::pfm::{read_pfm, write_pfm};
use crate::tensor::Tensor;

/// A rendered scene: the reference view first, then the sources, plus the
/// reference ground-truth depth `[H, W]` and the hypothesis search range.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub reference: CameraView,
    pub sources: Vec<CameraView>,
    pub gt_depth: Tensor,
    pub depth_range: (f32, f32),
}

/// Shape of the generated world and rig.
#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Number of source views (the reference comes on top of these).
    pub views: usize,
    /// Depth search range handed to hypothesis generation; the plane is laid
    /// out to keep true depth comfortably inside it.
    pub depth_range: (f32, f32),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            views: 2,
            depth_range: (2.0, 6.0),
            seed: 7,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic lattice value in `[0, 1)` for integer cell `(ix, iy)`.
fn lattice(seed: u64, ix: i64, iy: i64) -> f32 {
    let mixed = splitmix64(
        seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    (mixed >> 40) as f32 / (1u64 << 24) as f32
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise at plane coordinates `(u, v)`.
fn value_noise(seed: u64, u: f32, v: f32) -> f32 {
    let (fu, fv) = (u.floor(), v.floor());
    let (ix, iy) = (fu as i64, fv as i64);
    let (tu, tv) = (smoothstep(u - fu), smoothstep(v - fv));
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * tu;
    let bot = v01 + (v11 - v01) * tu;
    top + (bot - top) * tv
}

/// Four octaves of value noise, normalized back to roughly `[0, 1]`.
fn texture(seed: u64, u: f32, v: f32) -> f32 {
    let mut sum = 0.0;
    let mut amplitude = 1.0;
    let mut total = 0.0;
    let mut frequency = 1.0;
    for octave in 0..4u64 {
        sum += amplitude * value_noise(seed.wrapping_add(octave), u * frequency, v * frequency);
        total += amplitude;
        amplitude *= 0.5;
        frequency *= 2.0;
    }
    sum / total
}

/// The plane `z = z0 + a·x + b·y` in reference-camera coordinates, i.e.
/// `n·X = z0` with `n = (−a, −b, 1)`.
struct Plane {
    z0: f64,
    a: f64,
    b: f64,
}

impl Plane {
    fn normal(&self) -> Vec3 {
        Vec3([-self.a, -self.b, 1.0])
    }

    /// Distance `s` along a ray `X_ref = origin + s·dir` to the plane.
    fn hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-9 {
            return None;
        }
        let s = (self.z0 - n.dot(origin)) / denom;
        (s > 0.0).then_some(s)
    }
}

/// Renders the view at (`r`, `t`): for every pixel, the ray is intersected
/// with the plane and the texture evaluated at the hit point's reference-frame
/// (x, y). Returns the image and the per-pixel view-frame depth.
fn render(
    k: &Mat3,
    r: &Mat3,
    t: &Vec3,
    plane: &Plane,
    (h, w): (usize, usize),
    texture_seed: u64,
) -> Result<(Tensor, Tensor)> {
    let k_inv = k.inverse()?;
    let r_inv = r.transpose();
    // Camera center and ray rotation expressed in the reference frame:
    // X_ref = R⁻¹(X_view − t).
    let origin = r_inv.mul_vec(&t.scale(-1.0));
    let mut image = Tensor::zeros(&[h, w, 3]);
    let mut depth = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let pix = Vec3([x as f64, y as f64, 1.0]);
            let dir_view = k_inv.mul_vec(&pix);
            let dir = r_inv.mul_vec(&dir_view);
            let s = plane.hit(&origin, &dir).ok_or_else(|| {
                Error::arg("rig misconfigured: pixel ray parallel to or behind the plane")
            })?;
            let hit = origin.add(&dir.scale(s));
            // Depth is the view-frame z of the hit point; dir_view.z == 1.
            depth.data_mut()[y * w + x] = (s * dir_view.0[2]) as f32;
            let (u, v) = (hit.0[0] as f32 * 6.0, hit.0[1] as f32 * 6.0);
            for c in 0..3 {
                image.data_mut()[(y * w + x) * 3 + c] =
                    texture(texture_seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ c as u64, u, v);
            }
        }
    }
    Ok((image, depth))
}

/// Builds the scene: identity reference camera, `views` source cameras at
/// small offsets, analytic ground truth.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    if cfg.views == 0 {
        return Err(Error::arg("a scene needs at least one source view"));
    }
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::arg("scene extents below 8 pixels are not useful"));
    }
    let (h, w) = (cfg.height, cfg.width);
    let focal = w as f64;
    let k = Mat3::intrinsics(
        focal,
        focal,
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
    );
    // Depth stays within [z0/(1+|a|/2+|b|/2·aspect), z0/(1−…)] ≈ [2.6, 5.2]
    // for the defaults — comfortably inside the [2, 6] search range.
    let plane = Plane {
        z0: 3.5,
        a: 0.4,
        b: 0.25,
    };
    let (ref_image, gt_depth) = render(
        &k,
        &Mat3::rotation_xyz(0.0, 0.0, 0.0),
        &Vec3([0.0, 0.0, 0.0]),
        &plane,
        (h, w),
        cfg.seed,
    )?;
    let reference = CameraView::new(
        k,
        Mat3::rotation_xyz(0.0, 0.0, 0.0),
        Vec3([0.0, 0.0, 0.0]),
        ref_image,
    )?;

    let deg = std::f64::consts::PI / 180.0;
    let mut sources = Vec::with_capacity(cfg.views);
    for i in 0..cfg.views {
        // Alternate left/right of the reference, with mild jitter from the
        // seed so different scenes use slightly different rigs.
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let lane = (i / 2 + 1) as f64;
        let jitter = |salt: u64| {
            (splitmix64(cfg.seed ^ salt.wrapping_mul(0x0D1B_2441_59F5_66EE) ^ i as u64) >> 40)
                as f64
                / (1u64 << 24) as f64
                - 0.5
        };
        let baseline = side * lane * (0.25 + 0.05 * jitter(1));
        let rise = 0.08 * jitter(2);
        // Camera center in reference coordinates; t = −R·C.
        let center = Vec3([baseline, rise, 0.02 * jitter(3)]);
        let r = Mat3::rotation_xyz(
            (0.5 * jitter(4)) * deg,
            (-side * 2.0 + 0.5 * jitter(5)) * deg,
            (0.3 * jitter(6)) * deg,
        );
        let t = r.mul_vec(&center).scale(-1.0);
        let (image, _) = render(&k, &r, &t, &plane, (h, w), cfg.seed)?;
        sources.push(CameraView::new(k, r, t, image)?);
    }

    Ok(SyntheticScene {
        reference,
        sources,
        gt_depth,
        depth_range: cfg.depth_range,
    })
}

fn matrix_lines(out: &mut String, rows: &[[f64; 3]]) {
    for row in rows {
        let _ = writeln!(out, "{} {} {}", row[0], row[1], row[2]);
    }
}

fn camera_text(view: &CameraView) -> String {
    let mut out = String::new();
    let k = &view.k.0;
    matrix_lines(
        &mut out,
        &[
            [k[0], k[1], k[2]],
            [k[3], k[4], k[5]],
            [k[6], k[7], k[8]],
        ],
    );
    let r = &view.r.0;
    let t = &view.t.0;
    for i in 0..3 {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            r[3 * i],
            r[3 * i + 1],
            r[3 * i + 2],
            t[i]
        );
    }
    out
}

fn parse_camera_text(text: &str, features: Tensor) -> Result<CameraView> {
    let numbers: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("bad camera entry {t:?}")))
        })
        .collect::<Result<_>>()?;
    if numbers.len() != 21 {
        return Err(Error::Format(format!(
            "camera file wants 9 + 12 numbers, got {}",
            numbers.len()
        )));
    }
    let mut k = [0.0; 9];
    k.copy_from_slice(&numbers[..9]);
    let mut r = [0.0; 9];
    let mut t = [0.0; 3];
    for i in 0..3 {
        r[3 * i..3 * i + 3].copy_from_slice(&numbers[9 + 4 * i..9 + 4 * i + 3]);
        t[i] = numbers[9 + 4 * i + 3];
    }
    CameraView::new(Mat3(k), Mat3(r), Vec3(t), features)
}

/// Writes a scene directory: `view_0000` is the reference; each view has
/// `.pfm` image and `.txt` camera; `gt_depth.pfm` and `meta.toml` round out
/// the set.
pub fn save_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let views = std::iter::once(&scene.reference).chain(&scene.sources);
    for (i, view) in views.enumerate() {
        write_pfm(&dir.join(format!("view_{i:04}.pfm")), &view.features)?;
        std::fs::write(dir.join(format!("view_{i:04}.txt")), camera_text(view))?;
    }
    write_pfm(&dir.join("gt_depth.pfm"), &scene.gt_depth)?;
    let meta = format!(
        "views = {}\ndepth_min = {}\ndepth_max = {}\n",
        scene.sources.len() + 1,
        scene.depth_range.0,
        scene.depth_range.1
    );
    std::fs::write(dir.join("meta.toml"), meta)?;
    Ok(())
}

/// Reads a directory written by [`save_scene`].
pub fn load_scene(dir: &Path) -> Result<SyntheticScene> {
    let meta: toml::Value = std::fs::read_to_string(dir.join("meta.toml"))?
        .parse()
        .map_err(|e| Error::Format(format!("meta.toml: {e}")))?;
    let field = |name: &str| -> Result<f64> {
        meta.get(name)
            .and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
            .ok_or_else(|| Error::Format(format!("meta.toml missing numeric {name:?}")))
    };
    let views = field("views")? as usize;
    if views < 2 {
        return Err(Error::Format("scene must hold ≥ 2 views".into()));
    }
    let mut loaded = Vec::with_capacity(views);
    for i in 0..views {
        let image = read_pfm(&dir.join(format!("view_{i:04}.pfm")))?;
        let text = std::fs::read_to_string(dir.join(format!("view_{i:04}.txt")))?;
        loaded.push(parse_camera_text(&text, image)?);
    }
    let reference = loaded.remove(0);
    let gt_depth = read_pfm(&dir.join("gt_depth.pfm"))?;
    if gt_depth.shape() != &reference.features.shape()[..2] {
        return Err(Error::Format(
            "ground-truth extents disagree with the reference image".into(),
        ));
    }
    Ok(SyntheticScene {
        reference,
        sources: loaded,
        gt_depth,
        depth_range: (field("depth_min")? as f32, field("depth_max")? as f32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::WarpRig;

    fn small() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn ground_truth_stays_inside_the_search_range() {
        let scene = generate_scene(&small()).unwrap();
        let (lo, hi) = scene.depth_range;
        for &d in scene.gt_depth.data() {
            assert!(d > lo && d < hi, "depth {d} outside ({lo}, {hi})");
        }
    }

    #[test]
    fn ground_truth_is_a_nonconstant_smooth_ramp() {
        let scene = generate_scene(&small()).unwrap();
        let data = scene.gt_depth.data();
        let min = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(max - min > 0.5, "plane should be visibly slanted");
        // Monotone along each row: the slant has no folds.
        for row in data.chunks(32) {
            let increasing = row.windows(2).all(|p| p[1] >= p[0]);
            let decreasing = row.windows(2).all(|p| p[1] <= p[0]);
            assert!(increasing || decreasing);
        }
    }

    #[test]
    fn reprojection_consistency_against_the_warp() {
        // A reference pixel warped into a source view at its ground-truth
        // depth must land on a source pixel with (nearly) the same color:
        // the rendering and the warp share geometry.
        let scene = generate_scene(&small()).unwrap();
        let src = &scene.sources[0];
        let rig = WarpRig::new(&scene.reference.k, src).unwrap();
        let (h, w) = (32usize, 32usize);
        let mut checked = 0;
        for y in (2..h - 2).step_by(5) {
            for x in (2..w - 2).step_by(5) {
                let d = scene.gt_depth.data()[y * w + x] as f64;
                let ((sx, sy), valid) = rig.warp((x as f64, y as f64), d);
                if !valid || sx < 1.0 || sy < 1.0 || sx > w as f64 - 2.0 || sy > h as f64 - 2.0 {
                    continue;
                }
                checked += 1;
                // Bilinear sample of the source image at the warped spot.
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (fx, fy) = ((sx - sx.floor()) as f32, (sy - sy.floor()) as f32);
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| src.features.data()[(yy * w + xx) * 3 + c];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                    let sampled = top * (1.0 - fy) + bot * fy;
                    let want = scene.reference.features.data()[(y * w + x) * 3 + c];
                    // Bilinear resampling of a noise texture is lossy;
                    // colors must agree to a coarse tolerance.
                    assert!(
                        (sampled - want).abs() < 0.25,
                        "pixel ({x},{y}) channel {c}: {sampled} vs {want}"
                    );
                }
            }
        }
        assert!(checked > 10, "too few pixels warped into the source view");
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a.gt_depth.data(), b.gt_depth.data());
        assert_eq!(
            a.sources[1].features.data(),
            b.sources[1].features.data()
        );
        let c = generate_scene(&SceneConfig {
            seed: 8,
            ..small()
        })
        .unwrap();
        assert_ne!(a.reference.features.data(), c.reference.features.data());
    }

    #[test]
    fn texture_has_octave_detail() {
        // Neighboring pixels differ (high octaves) but are correlated (low
        // octaves): the image is neither constant nor white noise.
        let scene = generate_scene(&small()).unwrap();
        let img = scene.reference.features.data();
        let mut neighbor_delta = 0.0f64;
        let mut far_delta = 0.0f64;
        let n = 31 * 32;
        for i in 0..n {
            neighbor_delta += (img[i * 3] - img[(i + 32) * 3]).abs() as f64;
        }
        for i in 0..n / 2 {
            far_delta += (img[i * 3] - img[(i + 16 * 32) * 3]).abs() as f64;
        }
        let neighbor = neighbor_delta / n as f64;
        let far = far_delta / (n / 2) as f64;
        assert!(neighbor > 1e-3, "texture is locally flat");
        assert!(far > neighbor, "texture lacks large-scale structure");
    }

    #[test]
    fn scene_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&small()).unwrap();
        save_scene(dir.path(), &scene).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.sources.len(), scene.sources.len());
        assert_eq!(back.gt_depth.data(), scene.gt_depth.data());
        assert_eq!(
            back.reference.features.data(),
            scene.reference.features.data()
        );
        assert_eq!(back.depth_range, scene.depth_range);
        let (ka, kb) = (scene.sources[0].k.0, back.sources[0].k.0);
        assert_eq!(ka, kb);
        let (ra, rb) = (scene.sources[0].r.0, back.sources[0].r.0);
        for (a, b) in ra.iter().zip(&rb) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
