//! Bilinear sampling of a 2-D feature map at fractional pixel coordinates,
//! differentiable in both the map and the coordinates.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Corner indices and weights for one in-bounds sample. The upper corner is
/// clamped so sampling exactly on the far edge stays in range (its weight is
/// zero there).
struct Corners {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f32,
    fy: f32,
}

fn corners(x: f32, y: f32, w: usize, h: usize) -> Option<Corners> {
    if !x.is_finite() || !y.is_finite() {
        return None;
    }
    if x < 0.0 || y < 0.0 || x > (w - 1) as f32 || y > (h - 1) as f32 {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    Some(Corners {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: x - x0 as f32,
        fy: y - y0 as f32,
    })
}

impl Tape {
    /// Samples `map` (shape `[H, W, C]`) at `coords` (shape `[N, 2]`, each row
    /// `(x, y)` in pixel units). Returns the `[N, C]` samples plus a plain
    /// `[N]` mask holding 1 where the point landed inside the map and 0 where
    /// it fell outside (those rows read as zero). The mask is data, not a
    /// differentiable value: validity is a step function of position.
    pub fn bilinear_sample(&self, map: Var, coords: Var) -> Result<(Var, Tensor)> {
        self.check(map)?;
        self.check(coords)?;
        let (out, valid) = {
            let m = self.value(map);
            let c = self.value(coords);
            if m.rank() != 3 {
                return Err(Error::shape(format!(
                    "bilinear_sample map wants [H, W, C], got {:?}",
                    m.shape()
                )));
            }
            if c.rank() != 2 || c.shape()[1] != 2 {
                return Err(Error::shape(format!(
                    "bilinear_sample coords want [N, 2], got {:?}",
                    c.shape()
                )));
            }
            let (h, w, ch) = (m.shape()[0], m.shape()[1], m.shape()[2]);
            let n = c.shape()[0];
            let mut out = Tensor::zeros(&[n, ch]);
            let mut valid = Tensor::zeros(&[n]);
            let md = m.data();
            let cd = c.data();
            let vd = valid.data_mut();
            // Each output row is owned by one closure call; the valid mask is
            // written up front so the parallel pass only touches `out`.
            for (i, v) in vd.iter_mut().enumerate() {
                if corners(cd[2 * i], cd[2 * i + 1], w, h).is_some() {
                    *v = 1.0;
                }
            }
            parallel::for_each_chunk_mut(out.data_mut(), ch, |i, row| {
                if let Some(k) = corners(cd[2 * i], cd[2 * i + 1], w, h) {
                    let r00 = &md[(k.y0 * w + k.x0) * ch..][..ch];
                    let r10 = &md[(k.y0 * w + k.x1) * ch..][..ch];
                    let r01 = &md[(k.y1 * w + k.x0) * ch..][..ch];
                    let r11 = &md[(k.y1 * w + k.x1) * ch..][..ch];
                    let (w00, w10) = ((1.0 - k.fx) * (1.0 - k.fy), k.fx * (1.0 - k.fy));
                    let (w01, w11) = ((1.0 - k.fx) * k.fy, k.fx * k.fy);
                    for (j, o) in row.iter_mut().enumerate() {
                        *o = w00 * r00[j] + w10 * r10[j] + w01 * r01[j] + w11 * r11[j];
                    }
                }
            });
            (out, valid)
        };
        let var = self.push(
            out,
            vec![map, coords],
            Box::new(move |args| {
                let m = args.parents[0];
                let c = args.parents[1];
                let g = args.grad.data();
                let (h, w, ch) = (m.shape()[0], m.shape()[1], m.shape()[2]);
                let n = c.shape()[0];
                let cd = c.data();
                let md = m.data();

                // Corner scatter: many samples can hit the same texel, so the
                // accumulation stays sequential and ordered by sample index.
                let dmap = args.needs[0].then(|| {
                    let mut dmap = Tensor::zeros(m.shape());
                    let dm = dmap.data_mut();
                    for i in 0..n {
                        let Some(k) = corners(cd[2 * i], cd[2 * i + 1], w, h) else {
                            continue;
                        };
                        let grow = &g[i * ch..(i + 1) * ch];
                        let (w00, w10) = ((1.0 - k.fx) * (1.0 - k.fy), k.fx * (1.0 - k.fy));
                        let (w01, w11) = ((1.0 - k.fx) * k.fy, k.fx * k.fy);
                        for (j, gv) in grow.iter().enumerate() {
                            dm[(k.y0 * w + k.x0) * ch + j] += w00 * gv;
                            dm[(k.y0 * w + k.x1) * ch + j] += w10 * gv;
                            dm[(k.y1 * w + k.x0) * ch + j] += w01 * gv;
                            dm[(k.y1 * w + k.x1) * ch + j] += w11 * gv;
                        }
                    }
                    dmap
                });

                // Position gradients come from the corner differences the
                // interpolation is linear in.
                let dcoords = args.needs[1].then(|| {
                    let mut dc = Tensor::zeros(c.shape());
                    parallel::for_each_chunk_mut(dc.data_mut(), 2, |i, pair| {
                        let Some(k) = corners(cd[2 * i], cd[2 * i + 1], w, h) else {
                            return;
                        };
                        let grow = &g[i * ch..(i + 1) * ch];
                        let r00 = &md[(k.y0 * w + k.x0) * ch..][..ch];
                        let r10 = &md[(k.y0 * w + k.x1) * ch..][..ch];
                        let r01 = &md[(k.y1 * w + k.x0) * ch..][..ch];
                        let r11 = &md[(k.y1 * w + k.x1) * ch..][..ch];
                        let mut gx = 0.0f32;
                        let mut gy = 0.0f32;
                        for (j, gv) in grow.iter().enumerate() {
                            let ddx = (1.0 - k.fy) * (r10[j] - r00[j]) + k.fy * (r11[j] - r01[j]);
                            let ddy = (1.0 - k.fx) * (r01[j] - r00[j]) + k.fx * (r11[j] - r10[j]);
                            gx += gv * ddx;
                            gy += gv * ddy;
                        }
                        pair[0] = gx;
                        pair[1] = gy;
                    });
                    dc
                });
                vec![dmap, dcoords]
            }),
        );
        Ok((var, valid))
    }
}
