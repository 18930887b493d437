//! Linear layers and batched matrix products on the tape.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use rand::Rng;

/// Weights for one affine map, stored `[fan_in, fan_out]` so the forward pass
/// is a plain row-major matmul.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// The same layer after its tensors were registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl LinearParams {
    /// Uniform fan-in init: entries drawn from ±1/√fan_in, bias zero.
    pub fn uniform_fan_in(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound));
        LinearParams {
            weight,
            bias: Some(Tensor::zeros(&[fan_out])),
        }
    }

    /// All-zero weights and bias; layers meant to start as the identity's
    /// residual branch use this.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Some(Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &Tape) -> LinearVars {
        LinearVars {
            weight: tape.leaf(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl Tape {
    /// Affine map over the last axis: every leading index is a row. `x` keeps
    /// its leading shape; only the final extent changes to `fan_out`.
    pub fn linear(&self, x: Var, layer: LinearVars) -> Result<Var> {
        self.check(x)?;
        self.check(layer.weight)?;
        if let Some(b) = layer.bias {
            self.check(b)?;
        }
        let out = {
            let xv = self.value(x);
            let wv = self.value(layer.weight);
            if xv.rank() < 1 || wv.rank() != 2 {
                return Err(Error::shape(format!(
                    "linear wants rank>=1 input and rank-2 weight, got {:?} / {:?}",
                    xv.shape(),
                    wv.shape()
                )));
            }
            let fan_in = wv.shape()[0];
            let fan_out = wv.shape()[1];
            if *xv.shape().last().unwrap() != fan_in {
                return Err(Error::shape(format!(
                    "linear input last extent {} != fan_in {}",
                    xv.shape().last().unwrap(),
                    fan_in
                )));
            }
            let rows = leading(xv.shape());
            let mut out_shape = xv.shape().to_vec();
            *out_shape.last_mut().unwrap() = fan_out;
            let mut out = Tensor::zeros(&out_shape);
            tensor::matmul_nn(xv.data(), wv.data(), rows, fan_in, fan_out, out.data_mut());
            if let Some(b) = layer.bias {
                let bv = self.value(b);
                if bv.shape() != [fan_out] {
                    return Err(Error::shape(format!(
                        "linear bias wants [{fan_out}], got {:?}",
                        bv.shape()
                    )));
                }
                let bd = bv.data();
                parallel::for_each_chunk_mut(out.data_mut(), fan_out, |_, row| {
                    for (o, b) in row.iter_mut().zip(bd) {
                        *o += b;
                    }
                });
            }
            out
        };

        let mut parents = vec![x, layer.weight];
        if let Some(b) = layer.bias {
            parents.push(b);
        }
        Ok(self.push(
            out,
            parents,
            Box::new(move |args| {
                let xv = args.parents[0];
                let wv = args.parents[1];
                let g = args.grad;
                let fan_in = wv.shape()[0];
                let fan_out = wv.shape()[1];
                let rows = leading(xv.shape());

                let dx = args.needs[0].then(|| {
                    let mut dx = Tensor::zeros(xv.shape());
                    tensor::matmul_nt(g.data(), wv.data(), rows, fan_out, fan_in, dx.data_mut());
                    dx
                });
                let dw = args.needs[1].then(|| {
                    let mut dw = Tensor::zeros(&[fan_in, fan_out]);
                    tensor::matmul_tn(xv.data(), g.data(), rows, fan_in, fan_out, dw.data_mut());
                    dw
                });
                let mut grads = vec![dx, dw];
                if args.needs.len() > 2 {
                    grads.push(args.needs[2].then(|| {
                        let mut db = Tensor::zeros(&[fan_out]);
                        for row in g.data().chunks_exact(fan_out) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        db
                    }));
                }
                grads
            }),
        ))
    }

    /// Two-layer perceptron with a GELU between: the transformer feed-forward
    /// block.
    pub fn mlp_gelu(&self, x: Var, hidden: LinearVars, out: LinearVars) -> Result<Var> {
        let h = self.linear(x, hidden)?;
        let h = self.gelu(h)?;
        self.linear(h, out)
    }

    /// Batched matmul `[B, M, K] x [B, K, N] -> [B, M, N]`, parallel over the
    /// batch axis.
    pub fn bmm_nn(&self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false)
    }

    /// Batched matmul against transposed right operand:
    /// `[B, M, K] x [B, N, K] -> [B, M, N]`. Attention scores use this form so
    /// neither operand needs an explicit transpose.
    pub fn bmm_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, true)
    }

    fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (out, m, k, n) = {
            let av = self.value(a);
            let bv = self.value(b);
            if av.rank() != 3 || bv.rank() != 3 {
                return Err(Error::shape(format!(
                    "bmm wants rank-3 operands, got {:?} / {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let (bk, bn) = if transpose_b {
                (bv.shape()[2], bv.shape()[1])
            } else {
                (bv.shape()[1], bv.shape()[2])
            };
            if bv.shape()[0] != bs || bk != k {
                return Err(Error::shape(format!(
                    "bmm operand mismatch: {:?} x {:?} (transpose_b={transpose_b})",
                    av.shape(),
                    bv.shape()
                )));
            }
            let mut out = Tensor::zeros(&[bs, m, bn]);
            let (ad, bd) = (av.data(), bv.data());
            parallel::for_each_chunk_mut(out.data_mut(), m * bn, |batch, obatch| {
                let abatch = &ad[batch * m * k..(batch + 1) * m * k];
                let bbatch = &bd[batch * k * bn..(batch + 1) * k * bn];
                if transpose_b {
                    tensor::matmul_nt_serial(abatch, bbatch, m, k, bn, obatch);
                } else {
                    tensor::matmul_nn_serial(abatch, bbatch, m, k, bn, obatch);
                }
            });
            (out, m, k, bn)
        };
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |args| {
                let av = args.parents[0];
                let bv = args.parents[1];
                let g = args.grad;
                let bs = av.shape()[0];
                let blen = bv.len() / bs;
                let da = args.needs[0].then(|| {
                    let mut da = Tensor::zeros(av.shape());
                    let (gd, bd) = (g.data(), bv.data());
                    parallel::for_each_chunk_mut(da.data_mut(), m * k, |batch, dbatch| {
                        let gb = &gd[batch * m * n..(batch + 1) * m * n];
                        let bb = &bd[batch * blen..(batch + 1) * blen];
                        if transpose_b {
                            // dA = G B (B stored [N, K])
                            tensor::matmul_nn_serial(gb, bb, m, n, k, dbatch);
                        } else {
                            // dA = G B^T (B stored [K, N])
                            tensor::matmul_nt_serial(gb, bb, m, n, k, dbatch);
                        }
                    });
                    da
                });
                let db = args.needs[1].then(|| {
                    let mut db = Tensor::zeros(bv.shape());
                    let (gd, ad) = (g.data(), av.data());
                    parallel::for_each_chunk_mut(db.data_mut(), blen, |batch, dbatch| {
                        let gb = &gd[batch * m * n..(batch + 1) * m * n];
                        let ab = &ad[batch * m * k..(batch + 1) * m * k];
                        if transpose_b {
                            // dB = G^T A -> [N, K]
                            tensor::matmul_tn_serial(gb, ab, m, n, k, dbatch);
                        } else {
                            // dB = A^T G -> [K, N]
                            tensor::matmul_tn_serial(ab, gb, m, k, n, dbatch);
                        }
                    });
                    db
                });
                vec![da, db]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_hand_computation() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let layer = LinearVars {
            weight: tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]).unwrap()),
            bias: Some(tape.leaf(Tensor::new(vec![3], vec![0.5, 0.0, 0.0]).unwrap())),
        };
        let y = tape.linear(x, layer).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.5, 2.0, 4.0, 3.5, 4.0, 10.0],
        );
    }

    #[test]
    fn linear_gradients_match_hand_derivation() {
        // y = x w: dy/dx = w summed over outputs, dy/dw = x summed over rows.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap());
        let layer = LinearVars { weight: w, bias: None };
        let y = tape.linear(x, layer).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn bias_gradient_sums_rows() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = LinearParams::uniform_fan_in(2, 2, &mut rng).bind(&tape);
        let y = tape.linear(x, layer).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(layer.bias.unwrap()).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn uniform_fan_in_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = LinearParams::uniform_fan_in(16, 4, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(layer.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(layer.bias.unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn bmm_variants_agree_with_flat_matmul() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| (i as f32 * 0.3).sin()));
        let b = tape.leaf(Tensor::from_fn(&[2, 4, 5], |i| (i as f32 * 0.7).cos()));
        let bt = {
            // Same values as b but stored [2, 5, 4].
            let bv = tape.value(b).clone();
            let mut t = Tensor::zeros(&[2, 5, 4]);
            for batch in 0..2 {
                for r in 0..4 {
                    for c in 0..5 {
                        t.data_mut()[batch * 20 + c * 4 + r] = bv.data()[batch * 20 + r * 5 + c];
                    }
                }
            }
            tape.leaf(t)
        };
        let y_nn = tape.bmm_nn(a, b).unwrap();
        let y_nt = tape.bmm_nt(a, bt).unwrap();
        assert_eq!(tape.value(y_nn).data(), tape.value(y_nt).data());
    }

    #[test]
    fn bmm_gradcheck_small() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 1, 2], vec![2.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2, 1], vec![5.0, 7.0]).unwrap());
        let y = tape.bmm_nn(a, b).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let layer = LinearVars {
            weight: tape.leaf(Tensor::zeros(&[4, 2])),
            bias: None,
        };
        assert!(tape.linear(x, layer).is_err());
        let a = tape.leaf(Tensor::zeros(&[1, 2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3, 1]));
        assert!(tape.bmm_nn(a, b).is_err());
    }
}
