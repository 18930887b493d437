//! Pointwise arithmetic and activations.
//!
//! GELU uses the exact Gaussian-CDF form `x·Φ(x)` (no tanh approximation),
//! evaluated in double precision through `erf` before rounding to `f32`.

use super::ensure_same_shape;
use crate::error::Result;
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const CHUNK: usize = 8192;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// 1/sqrt(2*pi), the standard normal density at 0.
const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub(crate) fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Standard normal density.
pub(crate) fn phi_density(x: f64) -> f64 {
    INV_SQRT_TAU * (-0.5 * x * x).exp()
}

fn map_unary(x: &Tensor, f: impl Fn(f32) -> f32 + Send + Sync) -> Tensor {
    let mut out = x.clone();
    let src = x.data();
    parallel::for_each_chunk_mut(out.data_mut(), CHUNK, |i, chunk| {
        let base = i * CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = f(src[base + j]);
        }
    });
    out
}

fn map_binary(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32 + Send + Sync) -> Tensor {
    let mut out = a.clone();
    let (sa, sb) = (a.data(), b.data());
    parallel::for_each_chunk_mut(out.data_mut(), CHUNK, |i, chunk| {
        let base = i * CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = f(sa[base + j], sb[base + j]);
        }
    });
    out
}

impl Tape {
    /// Records a unary pointwise op. `dydx(x, y)` returns the local derivative
    /// given the input and output values.
    fn unary_pointwise(
        &self,
        a: Var,
        f: impl Fn(f32) -> f32 + Send + Sync,
        dydx: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
    ) -> Result<Var> {
        self.check(a)?;
        let out = map_unary(&self.value(a), f);
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |args| {
                let x = args.parents[0].data();
                let y = args.output.data();
                let mut dx = args.grad.clone();
                parallel::for_each_chunk_mut(dx.data_mut(), CHUNK, |i, chunk| {
                    let base = i * CHUNK;
                    for (j, g) in chunk.iter_mut().enumerate() {
                        *g *= dydx(x[base + j], y[base + j]);
                    }
                });
                vec![Some(dx)]
            }),
        ))
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            ensure_same_shape("add", ta.shape(), tb.shape())?;
            map_binary(&ta, &tb, |x, y| x + y)
        };
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            ensure_same_shape("sub", ta.shape(), tb.shape())?;
            map_binary(&ta, &tb, |x, y| x - y)
        };
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|args| {
                let neg = map_unary(args.grad, |g| -g);
                vec![Some(args.grad.clone()), Some(neg)]
            }),
        ))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            ensure_same_shape("mul", ta.shape(), tb.shape())?;
            map_binary(&ta, &tb, |x, y| x * y)
        };
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|args| {
                let da = args.needs[0].then(|| map_binary(args.grad, args.parents[1], |g, y| g * y));
                let db = args.needs[1].then(|| map_binary(args.grad, args.parents[0], |g, x| g * x));
                vec![da, db]
            }),
        ))
    }

    /// Element-wise quotient. The caller is responsible for keeping the
    /// denominator away from zero (see `clamp_min`).
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            ensure_same_shape("div", ta.shape(), tb.shape())?;
            map_binary(&ta, &tb, |x, y| x / y)
        };
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(|args| {
                let b = args.parents[1];
                let da = args.needs[0].then(|| map_binary(args.grad, b, |g, y| g / y));
                let db = args.needs[1].then(|| {
                    let mut d = map_binary(args.grad, args.output, |g, o| -g * o);
                    let dd = map_binary(&d, b, |v, y| v / y);
                    d = dd;
                    d
                });
                vec![da, db]
            }),
        ))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary_pointwise(a, |x| -x, |_, _| -1.0)
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&self, a: Var, c: f32) -> Result<Var> {
        self.unary_pointwise(a, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: f32) -> Result<Var> {
        self.unary_pointwise(a, move |x| x + c, |_, _| 1.0)
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary_pointwise(
            a,
            f32::abs,
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// 1/x.
    pub fn recip(&self, a: Var) -> Result<Var> {
        self.unary_pointwise(a, |x| 1.0 / x, |_, y| -y * y)
    }

    /// Smooth L1 (Huber, threshold 1): x²/2 inside the unit band, |x| − 1/2
    /// outside. Value and slope are both continuous at the knee.
    pub fn smooth_l1(&self, a: Var) -> Result<Var> {
        self.unary_pointwise(
            a,
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            |x, _| x.clamp(-1.0, 1.0),
        )
    }

    /// Clamp into [lo, hi]; gradient passes only strictly inside the band
    /// (boundary values pass too — the usual clamp subgradient).
    pub fn clamp(&self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        self.unary_pointwise(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, a: Var, lo: f32) -> Result<Var> {
        self.unary_pointwise(
            a,
            move |x| x.max(lo),
            move |x, _| if x >= lo { 1.0 } else { 0.0 },
        )
    }

    /// Logistic sigmoid, numerically stable on both tails.
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary_pointwise(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    /// Exact GELU: `x·Φ(x)` with Φ the standard normal CDF.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary_pointwise(
            a,
            |x| {
                let xd = x as f64;
                (xd * phi(xd)) as f32
            },
            |x, _| {
                let xd = x as f64;
                (phi(xd) + xd * phi_density(xd)) as f32
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn gelu_matches_double_precision_normal_cdf_oracle() {
        // Φ(1) computed independently from the erf series via libm here, and
        // cross-checked against the textbook value.
        let expected = 0.841_344_746_068_543; // Φ(1)
        assert!((phi(1.0) - expected).abs() < 1e-12);
        let tape = Tape::new();
        let x = tape.leaf(one(1.0));
        let y = tape.gelu(x).unwrap();
        let got = tape.value(y).data()[0] as f64;
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn gelu_is_zero_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(one(0.0));
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
    }

    #[test]
    fn sigmoid_is_stable_on_extreme_inputs() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-200.0, 200.0]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        let v = tape.value(y);
        assert!(v.data()[0] >= 0.0 && v.data()[0] < 1e-30);
        assert_eq!(v.data()[1], 1.0);
        assert!(v.is_all_finite());
    }

    #[test]
    fn div_backward_matches_quotient_rule() {
        // z = a/b at a=1, b=2: dz/da = 1/2, dz/db = -1/4.
        let tape = Tape::new();
        let a = tape.leaf(one(1.0));
        let b = tape.leaf(one(2.0));
        let z = tape.div(a, b).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[0.5]);
        assert_eq!(g.wrt(b).unwrap().data(), &[-0.25]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_band() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-2.0, 0.5, 2.0]).unwrap());
        let y = tape.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 0.5, 1.0]);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }
}
