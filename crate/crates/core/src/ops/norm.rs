//! Softmax and layer normalization along an arbitrary axis.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;

struct AxisDims {
    len: usize,
    inner: usize,
    block: usize,
}

fn axis_dims(shape: &[usize], axis: usize) -> Result<AxisDims> {
    if axis >= shape.len() {
        return Err(Error::arg(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok(AxisDims {
        len,
        inner,
        block: len * inner,
    })
}

impl Tape {
    /// Numerically stable softmax along `axis` (max-subtraction). Rejects NaN
    /// inputs, which would otherwise silently poison the normalization.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let (out, dims) = {
            let t = self.value(x);
            let dims = axis_dims(t.shape(), axis)?;
            if t.data().iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("softmax input contains NaN".into()));
            }
            let mut out = t.clone();
            let src = t.data();
            let (len, inner) = (dims.len, dims.inner);
            parallel::for_each_chunk_mut(out.data_mut(), dims.block, |o, block| {
                let sblock = &src[o * block.len()..o * block.len() + block.len()];
                for i in 0..inner {
                    let mut m = f32::NEG_INFINITY;
                    for j in 0..len {
                        m = m.max(sblock[j * inner + i]);
                    }
                    let mut sum = 0.0f32;
                    for j in 0..len {
                        let e = (sblock[j * inner + i] - m).exp();
                        block[j * inner + i] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        block[j * inner + i] /= sum;
                    }
                }
            });
            (out, dims)
        };
        let (len, inner, block) = (dims.len, dims.inner, dims.block);
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |args| {
                // dx_j = y_j (g_j - sum_k g_k y_k) along the axis.
                let y = args.output.data();
                let g = args.grad.data();
                let mut dx = args.grad.clone();
                parallel::for_each_chunk_mut(dx.data_mut(), block, |o, dblock| {
                    let base = o * block;
                    for i in 0..inner {
                        let mut dotgy = 0.0f32;
                        for j in 0..len {
                            let k = base + j * inner + i;
                            dotgy += g[k] * y[k];
                        }
                        for j in 0..len {
                            let k = base + j * inner + i;
                            dblock[j * inner + i] = y[k] * (g[k] - dotgy);
                        }
                    }
                });
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer norm along `axis`: per-slice standardization (biased variance,
    /// epsilon inside the square root) followed by a per-channel affine map.
    /// `gamma`/`beta` are rank-1 with the axis extent.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (out, dims) = {
            let t = self.value(x);
            let gm = self.value(gamma);
            let bt = self.value(beta);
            let dims = axis_dims(t.shape(), axis)?;
            if gm.shape() != [dims.len] || bt.shape() != [dims.len] {
                return Err(Error::shape(format!(
                    "layer_norm affine params want [{}], got {:?}/{:?}",
                    dims.len,
                    gm.shape(),
                    bt.shape()
                )));
            }
            let src = t.data();
            let (g, b) = (gm.data(), bt.data());
            let (len, inner) = (dims.len, dims.inner);
            let mut out = t.clone();
            parallel::for_each_chunk_mut(out.data_mut(), dims.block, |o, block| {
                let sblock = &src[o * block.len()..o * block.len() + block.len()];
                for i in 0..inner {
                    let mut mean = 0.0f32;
                    for j in 0..len {
                        mean += sblock[j * inner + i];
                    }
                    mean /= len as f32;
                    let mut var = 0.0f32;
                    for j in 0..len {
                        let d = sblock[j * inner + i] - mean;
                        var += d * d;
                    }
                    var /= len as f32;
                    let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
                    for j in 0..len {
                        let xhat = (sblock[j * inner + i] - mean) * inv_sigma;
                        block[j * inner + i] = xhat * g[j] + b[j];
                    }
                }
            });
            (out, dims)
        };
        let (len, inner, block) = (dims.len, dims.inner, dims.block);
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            Box::new(move |args| {
                let x = args.parents[0].data();
                let gm = args.parents[1].data();
                let g = args.grad.data();
                let slices = x.len() / block;

                let mut dx = args.needs[0].then(|| args.grad.clone());
                if let Some(dx) = dx.as_mut() {
                    parallel::for_each_chunk_mut(dx.data_mut(), block, |o, dblock| {
                        let base = o * block;
                        for i in 0..inner {
                            let mut mean = 0.0f32;
                            for j in 0..len {
                                mean += x[base + j * inner + i];
                            }
                            mean /= len as f32;
                            let mut var = 0.0f32;
                            for j in 0..len {
                                let d = x[base + j * inner + i] - mean;
                                var += d * d;
                            }
                            var /= len as f32;
                            let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
                            // gy = upstream grad routed through gamma; project
                            // out its mean and its xhat component.
                            let mut mean_gy = 0.0f32;
                            let mut mean_gy_xhat = 0.0f32;
                            for j in 0..len {
                                let k = base + j * inner + i;
                                let xhat = (x[k] - mean) * inv_sigma;
                                let gy = g[k] * gm[j];
                                mean_gy += gy;
                                mean_gy_xhat += gy * xhat;
                            }
                            mean_gy /= len as f32;
                            mean_gy_xhat /= len as f32;
                            for j in 0..len {
                                let k = base + j * inner + i;
                                let xhat = (x[k] - mean) * inv_sigma;
                                let gy = g[k] * gm[j];
                                dblock[j * inner + i] =
                                    (gy - mean_gy - xhat * mean_gy_xhat) * inv_sigma;
                            }
                        }
                    });
                }

                // Channel gradients accumulate across slices in slice order.
                let mut dgamma = args.needs[1].then(|| Tensor::zeros(&[len]));
                let mut dbeta = args.needs[2].then(|| Tensor::zeros(&[len]));
                if dgamma.is_some() || dbeta.is_some() {
                    for o in 0..slices {
                        let base = o * block;
                        for i in 0..inner {
                            let mut mean = 0.0f32;
                            for j in 0..len {
                                mean += x[base + j * inner + i];
                            }
                            mean /= len as f32;
                            let mut var = 0.0f32;
                            for j in 0..len {
                                let d = x[base + j * inner + i] - mean;
                                var += d * d;
                            }
                            var /= len as f32;
                            let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
                            for j in 0..len {
                                let k = base + j * inner + i;
                                if let Some(dg) = dgamma.as_mut() {
                                    dg.data_mut()[j] += g[k] * (x[k] - mean) * inv_sigma;
                                }
                                if let Some(db) = dbeta.as_mut() {
                                    db.data_mut()[j] += g[k];
                                }
                            }
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        ))
    }
}

/// Learnable layer-norm scale and shift over one axis of length `dim`.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    /// Fresh affine: gamma 1, beta 0, so the norm starts as pure
    /// standardization.
    pub fn identity(dim: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn bind(&self, tape: &Tape) -> LayerNormVars {
        LayerNormVars {
            gamma: tape.leaf(self.gamma.clone()),
            beta: tape.leaf(self.beta.clone()),
        }
    }
}

/// Tape handles for one layer norm's affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl Tape {
    /// [`Tape::layer_norm`] with a bound parameter pair.
    pub fn layer_norm_with(&self, x: Var, ln: LayerNormVars, axis: usize) -> Result<Var> {
        self.layer_norm(x, ln.gamma, ln.beta, axis)
    }
}
