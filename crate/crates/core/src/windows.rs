//! 3D window partitioning with cyclic shifts, attention masks, relative-
//! position bias indexing, and the gather maps for patching, convolution, and
//! upsampling.
//!
//! Everything here is index bookkeeping: each structure precomputes `i64` row
//! maps that `Tape::gather_rows` executes, so the differentiable graph never
//! re-derives window geometry. Maps are wrapped in `Rc` and shared across
//! layers and training steps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive mask value for forbidden attention pairs; after softmax the
/// corresponding weights are below 1e-7 even against the strongest allowed
/// logits that occur here.
pub const MASK_BLOCK: f32 = -1e9;

/// Window geometry: extents along (height, width, depth) and whether the grid
/// is displaced by half a window before partitioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub extents: (usize, usize, usize),
    pub shifted: bool,
}

impl WindowSpec {
    pub fn new(extents: (usize, usize, usize), shifted: bool) -> Result<WindowSpec> {
        if extents.0 == 0 || extents.1 == 0 || extents.2 == 0 {
            return Err(Error::arg("window extents must all be at least 1"));
        }
        Ok(WindowSpec { extents, shifted })
    }

    /// Cyclic displacement applied before partitioning: half the extent per
    /// axis, rounded down, and zero for the regular grid.
    pub fn shift(&self) -> (usize, usize, usize) {
        if self.shifted {
            (self.extents.0 / 2, self.extents.1 / 2, self.extents.2 / 2)
        } else {
            (0, 0, 0)
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.extents.0 * self.extents.1 * self.extents.2
    }
}

/// Precomputed partition of a `[H, W, D, E]` token volume into shifted or
/// regular windows, with everything attention needs: the forward and inverse
/// gather maps, the cross-window masks, and the window counts.
///
/// Token order inside a window is depth-fastest: `t = (i·ws + j)·ds + k`, so
/// the `ds` tokens of one spatial position are consecutive — depth-fiber
/// attention can reinterpret window rows without moving data.
pub struct WindowPlan {
    pub spec: WindowSpec,
    /// Input extents (H, W, D) — the token volume, not the pixel volume.
    pub dims: (usize, usize, usize),
    /// Extents rounded up to window multiples (pads read as zero).
    pub padded: (usize, usize, usize),
    /// Window counts per axis; their product is `num_windows`.
    pub counts: (usize, usize, usize),
    pub num_windows: usize,
    pub tokens_per_window: usize,
    /// Gather map taking the flat `[H·W·D]` row list to `[Nw·T]` window rows
    /// (`-1` rows are padding and read zero).
    pub partition_map: Rc<Vec<i64>>,
    /// Gather map taking window rows back to the flat `[H·W·D]` row list;
    /// composing it after `partition_map` is the identity, bit for bit.
    pub reverse_map: Rc<Vec<i64>>,
    /// `[Nw, T, T]` additive mask (0 or `MASK_BLOCK`), or `None` when every
    /// pair is allowed. A pair is blocked when the two tokens came from
    /// different windows of the *unshifted* grid; padding tokens count as one
    /// extra pseudo-window (they may attend each other, and their outputs are
    /// dropped by the reverse map).
    pub mask: Option<Tensor>,
    /// Same rule restricted to each spatial position's depth fiber:
    /// `[Nw·hs·ws, ds, ds]`, or `None` when all-pass.
    pub fiber_mask: Option<Tensor>,
}

/// Identity of the unshifted window a padded coordinate belongs to; `None`
/// marks padding voxels.
fn pre_shift_id(
    orig: (usize, usize, usize),
    dims: (usize, usize, usize),
    extents: (usize, usize, usize),
) -> Option<(usize, usize, usize)> {
    if orig.0 < dims.0 && orig.1 < dims.1 && orig.2 < dims.2 {
        Some((orig.0 / extents.0, orig.1 / extents.1, orig.2 / extents.2))
    } else {
        None
    }
}

impl WindowPlan {
    pub fn new(dims: (usize, usize, usize), spec: WindowSpec) -> Result<WindowPlan> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::arg("window plan wants non-empty volume extents"));
        }
        let (hs, ws, ds) = spec.extents;
        let padded = (
            dims.0.div_ceil(hs) * hs,
            dims.1.div_ceil(ws) * ws,
            dims.2.div_ceil(ds) * ds,
        );
        let counts = (padded.0 / hs, padded.1 / ws, padded.2 / ds);
        let num_windows = counts.0 * counts.1 * counts.2;
        let t = spec.tokens_per_window();
        let shift = spec.shift();

        // The original padded coordinate living at shifted position q is
        // (q + shift) mod padded — the shift rolls content toward lower
        // indices, the standard direction for shifted grids.
        let orig_of = |q: (usize, usize, usize)| {
            (
                (q.0 + shift.0) % padded.0,
                (q.1 + shift.1) % padded.1,
                (q.2 + shift.2) % padded.2,
            )
        };

        let mut partition_map = vec![-1i64; num_windows * t];
        // Window-token ids per coordinate, reused by the mask pass: the id of
        // the unshifted window, or None for pads.
        let mut ids: Vec<Option<(usize, usize, usize)>> = vec![None; num_windows * t];
        for wy in 0..counts.0 {
            for wx in 0..counts.1 {
                for wd in 0..counts.2 {
                    let win = (wy * counts.1 + wx) * counts.2 + wd;
                    for i in 0..hs {
                        for j in 0..ws {
                            for k in 0..ds {
                                let tok = (i * ws + j) * ds + k;
                                let q = (wy * hs + i, wx * ws + j, wd * ds + k);
                                let o = orig_of(q);
                                let row = win * t + tok;
                                ids[row] = pre_shift_id(o, dims, spec.extents);
                                if ids[row].is_some() {
                                    partition_map[row] =
                                        ((o.0 * dims.1 + o.1) * dims.2 + o.2) as i64;
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut reverse_map = vec![-1i64; dims.0 * dims.1 * dims.2];
        for (row, &src) in partition_map.iter().enumerate() {
            if src >= 0 {
                reverse_map[src as usize] = row as i64;
            }
        }
        debug_assert!(reverse_map.iter().all(|&m| m >= 0));

        let mut any_block = false;
        let mut mask = Tensor::zeros(&[num_windows, t, t]);
        {
            let md = mask.data_mut();
            for win in 0..num_windows {
                let base = win * t;
                for a in 0..t {
                    for b in 0..t {
                        if ids[base + a] != ids[base + b] {
                            md[(win * t + a) * t + b] = MASK_BLOCK;
                            any_block = true;
                        }
                    }
                }
            }
        }

        let fibers = num_windows * hs * ws;
        let mut any_fiber_block = false;
        let mut fiber_mask = Tensor::zeros(&[fibers, ds, ds]);
        {
            let md = fiber_mask.data_mut();
            for win in 0..num_windows {
                for ij in 0..hs * ws {
                    let base = win * t + ij * ds;
                    let fiber = win * hs * ws + ij;
                    for a in 0..ds {
                        for b in 0..ds {
                            if ids[base + a] != ids[base + b] {
                                md[(fiber * ds + a) * ds + b] = MASK_BLOCK;
                                any_fiber_block = true;
                            }
                        }
                    }
                }
            }
        }

        Ok(WindowPlan {
            spec,
            dims,
            padded,
            counts,
            num_windows,
            tokens_per_window: t,
            partition_map: Rc::new(partition_map),
            reverse_map: Rc::new(reverse_map),
            mask: any_block.then_some(mask),
            fiber_mask: any_fiber_block.then_some(fiber_mask),
        })
    }
}

/// Relative-position bin of every ordered token pair in one window, indexed
/// `t_query · T + t_key`. Offsets along each axis lie in `[-(e-1), e-1]`, so
/// the bins cover exactly `(2hs−1)(2ws−1)(2ds−1)` values when the window is
/// full.
pub fn bias_bins(extents: (usize, usize, usize)) -> Vec<i64> {
    let (hs, ws, ds) = extents;
    let t = hs * ws * ds;
    let pos = |tok: usize| {
        let k = tok % ds;
        let j = (tok / ds) % ws;
        let i = tok / (ds * ws);
        (i as i64, j as i64, k as i64)
    };
    let mut bins = Vec::with_capacity(t * t);
    for a in 0..t {
        let pa = pos(a);
        for b in 0..t {
            let pb = pos(b);
            let (dh, dw, dd) = (pa.0 - pb.0, pa.1 - pb.1, pa.2 - pb.2);
            let idx = ((dh + hs as i64 - 1) * (2 * ws as i64 - 1) + (dw + ws as i64 - 1))
                * (2 * ds as i64 - 1)
                + (dd + ds as i64 - 1);
            bins.push(idx);
        }
    }
    bins
}

/// Relative-depth bin of every ordered pair within one depth fiber, indexed
/// `k_query · ds + k_key`; bins cover `2ds−1` values.
pub fn depth_bias_bins(ds: usize) -> Vec<i64> {
    let mut bins = Vec::with_capacity(ds * ds);
    for a in 0..ds as i64 {
        for b in 0..ds as i64 {
            bins.push(a - b + ds as i64 - 1);
        }
    }
    bins
}

/// How out-of-image taps read in [`im2col_2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Taps outside the image contribute zero.
    Zero,
    /// Taps clamp to the nearest edge pixel (used by the feature convs so
    /// borders see plausible context instead of black).
    Clamp,
}

/// Gather map unrolling `kh×kw` taps around each output pixel of a strided 2D
/// convolution over `[H, W, C]` rows. Output pixel `o` sits on input pixel
/// `o·stride` (center tap), giving `ceil(extent/stride)` outputs per axis.
/// Returns the map (length `out_h·out_w·kh·kw`, unit = C) and the output
/// extents.
pub fn im2col_2d(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: PadMode,
) -> (Vec<i64>, usize, usize) {
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel extents must be odd");
    assert!(stride >= 1);
    let out_h = h.div_ceil(stride);
    let out_w = w.div_ceil(stride);
    let mut map = Vec::with_capacity(out_h * out_w * kh * kw);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (cy, cx) = ((oy * stride) as i64, (ox * stride) as i64);
            for ty in 0..kh as i64 {
                for tx in 0..kw as i64 {
                    let y = cy + ty - (kh as i64 / 2);
                    let x = cx + tx - (kw as i64 / 2);
                    let entry = match pad {
                        PadMode::Zero => {
                            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                                -1
                            } else {
                                y * w as i64 + x
                            }
                        }
                        PadMode::Clamp => {
                            let y = y.clamp(0, h as i64 - 1);
                            let x = x.clamp(0, w as i64 - 1);
                            y * w as i64 + x
                        }
                    };
                    map.push(entry);
                }
            }
        }
    }
    (map, out_h, out_w)
}

/// Gather map collecting each `ph×pw×1` patch of a `[H, W, D, G]` volume into
/// one row (H and W zero-padded up to patch multiples, depth untouched).
/// Returns the map (length `h*·w*·d·ph·pw`, unit = G) and the patched extents
/// `(h*, w*)`.
pub fn patch_map_3d(
    h: usize,
    w: usize,
    d: usize,
    ph: usize,
    pw: usize,
) -> (Vec<i64>, usize, usize) {
    assert!(ph >= 1 && pw >= 1);
    let h_star = h.div_ceil(ph);
    let w_star = w.div_ceil(pw);
    let mut map = Vec::with_capacity(h_star * w_star * d * ph * pw);
    for oy in 0..h_star {
        for ox in 0..w_star {
            for z in 0..d {
                for ty in 0..ph {
                    for tx in 0..pw {
                        let y = oy * ph + ty;
                        let x = ox * pw + tx;
                        map.push(if y < h && x < w {
                            ((y * w + x) * d + z) as i64
                        } else {
                            -1
                        });
                    }
                }
            }
        }
    }
    (map, h_star, w_star)
}

/// Gather map expanding a `[h*, w*, d, E]` token grid back to `[h, w, d, E]`
/// pixels by nearest-neighbor: pixel (y, x) reads token (y/ph, x/pw).
pub fn upsample_map(
    h: usize,
    w: usize,
    d: usize,
    ph: usize,
    pw: usize,
) -> Vec<i64> {
    let w_star = w.div_ceil(pw);
    let mut map = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                map.push((((y / ph) * w_star + x / pw) * d + z) as i64);
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn window_count_matches_ceil_formula() {
        let spec = WindowSpec::new((7, 7, 2), false).unwrap();
        let plan = WindowPlan::new((28, 28, 8), spec).unwrap();
        assert_eq!(plan.counts, (4, 4, 4));
        assert_eq!(plan.num_windows, 64);
        assert_eq!(plan.tokens_per_window, 98);
        // No padding and no shift: nothing to mask.
        assert!(plan.mask.is_none());
        assert!(plan.fiber_mask.is_none());
    }

    #[test]
    fn partition_then_reverse_is_identity_bitwise() {
        let tape = Tape::new();
        for shifted in [false, true] {
            // Extents deliberately not multiples of the window.
            let dims = (5, 9, 3);
            let spec = WindowSpec::new((4, 4, 2), shifted).unwrap();
            let plan = WindowPlan::new(dims, spec).unwrap();
            let e = 3;
            let x = tape.leaf(Tensor::from_fn(&[dims.0, dims.1, dims.2, e], |i| {
                (i as f32 * 0.11).sin()
            }));
            let windows = tape
                .gather_rows(
                    x,
                    e,
                    Rc::clone(&plan.partition_map),
                    &[plan.num_windows, plan.tokens_per_window, e],
                )
                .unwrap();
            let back = tape
                .gather_rows(
                    windows,
                    e,
                    Rc::clone(&plan.reverse_map),
                    &[dims.0, dims.1, dims.2, e],
                )
                .unwrap();
            assert_eq!(tape.value(back).data(), tape.value(x).data());
        }
    }

    #[test]
    fn single_window_regular_partition_has_allpass_mask() {
        let spec = WindowSpec::new((4, 4, 2), false).unwrap();
        let plan = WindowPlan::new((4, 4, 2), spec).unwrap();
        assert_eq!(plan.num_windows, 1);
        assert!(plan.mask.is_none());
    }

    #[test]
    fn shifted_single_window_without_padding_is_allpass() {
        // Volume exactly one window: the shift is a pure rotation, every
        // token still belongs to the same pre-shift window.
        let spec = WindowSpec::new((4, 4, 2), true).unwrap();
        let plan = WindowPlan::new((4, 4, 2), spec).unwrap();
        assert!(plan.mask.is_none());
        assert!(plan.fiber_mask.is_none());
    }

    #[test]
    fn shifted_mask_blocks_exactly_the_cross_window_pairs() {
        let dims = (8, 8, 4);
        let extents = (4, 4, 2);
        let spec = WindowSpec::new(extents, true).unwrap();
        let plan = WindowPlan::new(dims, spec).unwrap();
        let mask = plan.mask.as_ref().expect("shifted multi-window mask");
        let t = plan.tokens_per_window;
        // Reconstruct every token's pre-shift window id straight from the
        // partition map and compare pair by pair.
        let id_of = |row: usize| -> Option<(usize, usize, usize)> {
            let src = plan.partition_map[row];
            (src >= 0).then(|| {
                let src = src as usize;
                let z = src % dims.2;
                let x = (src / dims.2) % dims.1;
                let y = src / (dims.2 * dims.1);
                (y / extents.0, x / extents.1, z / extents.2)
            })
        };
        for win in 0..plan.num_windows {
            for a in 0..t {
                for b in 0..t {
                    let blocked = mask.data()[(win * t + a) * t + b] != 0.0;
                    let same = id_of(win * t + a) == id_of(win * t + b);
                    assert_eq!(blocked, !same, "window {win} pair ({a},{b})");
                }
            }
        }
    }

    #[test]
    fn bias_bins_cover_the_full_table_exactly() {
        let extents = (7, 7, 2);
        let bins = bias_bins(extents);
        let expected = (2 * 7 - 1) * (2 * 7 - 1) * (2 * 2 - 1);
        let mut seen = vec![false; expected];
        for &b in &bins {
            assert!((0..expected as i64).contains(&b));
            seen[b as usize] = true;
        }
        assert_eq!(seen.iter().filter(|&&s| s).count(), 507);
    }

    #[test]
    fn depth_bias_bins_cover_their_range() {
        let bins = depth_bias_bins(2);
        assert_eq!(bins, vec![1, 0, 2, 1]);
    }

    #[test]
    fn im2col_clamp_keeps_border_taps_in_range() {
        let (map, oh, ow) = im2col_2d(3, 3, 3, 3, 1, PadMode::Clamp);
        assert_eq!((oh, ow), (3, 3));
        assert!(map.iter().all(|&m| (0..9).contains(&m)));
        // Top-left output: its upper-left tap clamps to pixel 0.
        assert_eq!(&map[..9], &[0, 0, 1, 0, 0, 1, 3, 3, 4]);
    }

    #[test]
    fn im2col_zero_marks_outside_taps() {
        let (map, oh, ow) = im2col_2d(4, 4, 3, 3, 2, PadMode::Zero);
        assert_eq!((oh, ow), (2, 2));
        // Output (0,0) centers on pixel (0,0): the first row and column of
        // taps fall outside.
        assert_eq!(&map[..9], &[-1, -1, -1, -1, 0, 1, -1, 4, 5]);
    }

    #[test]
    fn patch_map_covers_patches_and_pads() {
        let (map, hs, ws) = patch_map_3d(5, 4, 2, 4, 4);
        assert_eq!((hs, ws), (2, 1));
        // Second patch row covers y=4..7; only y=4 is real.
        let second_patch = &map[4 * 4 * 2..];
        let real = second_patch.iter().filter(|&&m| m >= 0).count();
        assert_eq!(real, 2 * 4); // one real row of 4 taps, 2 depth slices
    }

    #[test]
    fn upsample_reads_the_owning_token() {
        let map = upsample_map(5, 4, 1, 4, 4);
        // All of the first 4x4 block reads token 0; the 5th row reads token
        // from the second patch row.
        assert!(map[..16].iter().all(|&m| m == 0));
        assert!(map[16..].iter().all(|&m| m == 1));
    }
}
