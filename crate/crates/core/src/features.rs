//! A small strided convolutional pyramid that turns an RGB image into one
//! feature map per resolution stage.
//!
//! The trunk is one 3×3 convolution per stage — stride 1 at full resolution,
//! stride 2 for every coarser level, GELU between consecutive trunk
//! convolutions — and each level feeds a 3×3 stride-1 head that keeps the
//! channel count. Parameters are shared across views: every image of a scene
//! runs through the same bound weights. Borders use clamp padding, so odd
//! extents round up when strided.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{LinearParams, LinearVars};
use crate::tape::{Tape, Var};
use crate::windows::{im2col_2d, PadMode};

/// Channel width of trunk level `level` (0 = full resolution).
fn trunk_channels(level: usize) -> usize {
    8 << level
}

/// Weights for the pyramid. `trunk[l]` maps level `l−1` (or the RGB input)
/// to level `l`; `heads[l]` refines level `l` at its own width.
pub struct FeatureExtractorParams {
    pub(crate) trunk: Vec<LinearParams>,
    pub(crate) heads: Vec<LinearParams>,
}

pub struct FeatureExtractorVars {
    pub(crate) trunk: Vec<LinearVars>,
    pub(crate) heads: Vec<LinearVars>,
}

impl FeatureExtractorParams {
    pub fn init(stages: usize, rng: &mut impl Rng) -> Result<Self> {
        if stages == 0 {
            return Err(Error::arg("feature pyramid needs at least one stage"));
        }
        let mut trunk = Vec::with_capacity(stages);
        let mut heads = Vec::with_capacity(stages);
        for level in 0..stages {
            let c_in = if level == 0 {
                3
            } else {
                trunk_channels(level - 1)
            };
            let c_out = trunk_channels(level);
            trunk.push(LinearParams::uniform_fan_in(9 * c_in, c_out, rng));
            heads.push(LinearParams::uniform_fan_in(9 * c_out, c_out, rng));
        }
        Ok(FeatureExtractorParams { trunk, heads })
    }

    pub fn stages(&self) -> usize {
        self.trunk.len()
    }

    /// Per-stage channel counts, coarsest stage first.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stages())
            .rev()
            .map(trunk_channels)
            .collect()
    }

    pub fn bind(&self, tape: &Tape) -> FeatureExtractorVars {
        FeatureExtractorVars {
            trunk: self.trunk.iter().map(|p| p.bind(tape)).collect(),
            heads: self.heads.iter().map(|p| p.bind(tape)).collect(),
        }
    }
}

fn conv3x3(
    tape: &Tape,
    x: Var,
    (h, w): (usize, usize),
    c_in: usize,
    stride: usize,
    layer: LinearVars,
) -> Result<(Var, (usize, usize))> {
    let (map, oh, ow) = im2col_2d(h, w, 3, 3, stride, PadMode::Clamp);
    let cols = tape.gather_rows(x, c_in, Rc::new(map), &[oh * ow, 9 * c_in])?;
    Ok((tape.linear(cols, layer)?, (oh, ow)))
}

/// Runs the pyramid on one `[H, W, 3]` image. Returns one `[H_k, W_k, C_k]`
/// map per stage, coarsest first, resolutions halving (rounded up) from the
/// finest level.
pub fn extract_features(
    tape: &Tape,
    image: Var,
    vars: &FeatureExtractorVars,
) -> Result<Vec<Var>> {
    let shape = tape.shape_of(image);
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!("image wants [H, W, 3], got {shape:?}")));
    }
    let mut dims = (shape[0], shape[1]);
    let mut x = image;
    let mut c_in = 3;
    let mut maps = Vec::with_capacity(vars.trunk.len());
    for (level, (conv, head)) in vars.trunk.iter().zip(&vars.heads).enumerate() {
        if level > 0 {
            x = tape.gelu(x)?;
        }
        let stride = if level == 0 { 1 } else { 2 };
        let (trunk_out, out_dims) = conv3x3(tape, x, dims, c_in, stride, *conv)?;
        let c = trunk_channels(level);
        let (refined, _) = conv3x3(tape, trunk_out, out_dims, c, 1, *head)?;
        maps.push(tape.reshape(refined, &[out_dims.0, out_dims.1, c])?);
        x = trunk_out;
        dims = out_dims;
        c_in = c;
    }
    maps.reverse();
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_stage_pyramid_has_the_documented_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = FeatureExtractorParams::init(3, &mut rng).unwrap();
        assert_eq!(params.stage_channels(), vec![32, 16, 8]);
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let image = tape.leaf(Tensor::random_uniform(&[16, 16, 3], 0.0, 1.0, &mut rng));
        let maps = extract_features(&tape, image, &vars).unwrap();
        let shapes: Vec<Vec<usize>> = maps.iter().map(|&m| tape.shape_of(m)).collect();
        assert_eq!(
            shapes,
            vec![vec![4, 4, 32], vec![8, 8, 16], vec![16, 16, 8]]
        );
    }

    #[test]
    fn odd_extents_round_up_when_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = FeatureExtractorParams::init(3, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let image = tape.leaf(Tensor::random_uniform(&[10, 9, 3], 0.0, 1.0, &mut rng));
        let maps = extract_features(&tape, image, &vars).unwrap();
        assert_eq!(tape.shape_of(maps[0]), vec![3, 3, 32]);
        assert_eq!(tape.shape_of(maps[1]), vec![5, 5, 16]);
        assert_eq!(tape.shape_of(maps[2]), vec![10, 9, 8]);
    }

    #[test]
    fn constant_images_give_spatially_constant_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = FeatureExtractorParams::init(3, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let image = tape.leaf(Tensor::full(&[12, 12, 3], 0.4));
        let maps = extract_features(&tape, image, &vars).unwrap();
        for &m in &maps {
            let shape = tape.shape_of(m);
            let c = shape[2];
            let data = tape.value(m).data().to_vec();
            let first = &data[..c];
            for px in data.chunks(c) {
                for (a, b) in px.iter().zip(first) {
                    assert!((a - b).abs() <= 1e-6, "spatial variation on constant input");
                }
            }
        }
    }

    #[test]
    fn identical_images_share_weights_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = FeatureExtractorParams::init(2, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let pixels = Tensor::random_uniform(&[8, 8, 3], 0.0, 1.0, &mut rng);
        let a = extract_features(&tape, tape.leaf(pixels.clone()), &vars).unwrap();
        let b = extract_features(&tape, tape.leaf(pixels), &vars).unwrap();
        for (&ma, &mb) in a.iter().zip(&b) {
            assert_eq!(tape.value(ma).data(), tape.value(mb).data());
        }
    }

    #[test]
    fn first_layer_matches_a_convolution_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = FeatureExtractorParams::init(1, &mut rng).unwrap();
        let (h, w) = (6, 7);
        let image = Tensor::random_uniform(&[h, w, 3], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let (out, dims) = conv3x3(&tape, tape.leaf(image.clone()), (h, w), 3, 1, vars.trunk[0]).unwrap();
        assert_eq!(dims, (h, w));
        let got = tape.value(out).data().to_vec();

        let weight = &params.trunk[0].weight;
        for oy in 0..h {
            for ox in 0..w {
                for co in 0..8 {
                    let mut acc = 0.0f64;
                    for ty in 0..3i64 {
                        for tx in 0..3i64 {
                            let sy = (oy as i64 + ty - 1).clamp(0, h as i64 - 1) as usize;
                            let sx = (ox as i64 + tx - 1).clamp(0, w as i64 - 1) as usize;
                            for ci in 0..3 {
                                let wi = ((ty * 3 + tx) as usize * 3 + ci) * 8 + co;
                                acc += image.data()[(sy * w + sx) * 3 + ci] as f64
                                    * weight.data()[wi] as f64;
                            }
                        }
                    }
                    let idx = (oy * w + ox) * 8 + co;
                    assert!(
                        (got[idx] as f64 - acc).abs() <= 1e-5,
                        "pixel ({oy},{ox}) channel {co}: {} vs {acc}",
                        got[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_reach_the_deepest_trunk_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = FeatureExtractorParams::init(3, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let image = tape.leaf(Tensor::random_uniform(&[8, 8, 3], 0.0, 1.0, &mut rng));
        let maps = extract_features(&tape, image, &vars).unwrap();
        let loss = tape.sum_all(maps[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, lv) in [("first conv", vars.trunk[0]), ("coarsest head", vars.heads[2])] {
            let g = grads.wrt(lv.weight).expect(name);
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} gradient all zero");
        }
    }
}
