//! Windowed multi-head self-attention on the tape.
//!
//! One routine serves every attention site in the model: full 3D windows,
//! per-fiber depth attention, and the 2D windows of the regression stack. The
//! caller supplies an [`AttentionGeometry`] describing how tokens are grouped
//! (batch of independent groups × tokens per group), which relative-position
//! bin each token pair uses, and an optional additive mask. Head
//! split/merge, bias lookup, and mask expansion are all precomputed gather
//! maps, so a forward pass is linear layers, two batched matmuls, and a
//! softmax.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{LinearParams, LinearVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Learnable state of one attention block: Q/K/V projections, the output
/// projection (zero-initialized so a fresh block is the residual identity),
/// and the relative-position bias table `[bins, heads]`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub bias_table: Tensor,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(embed: usize, heads: usize, bins: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(Error::arg(format!(
                "head count {heads} must divide embedding dim {embed}"
            )));
        }
        Ok(AttentionParams {
            query: LinearParams::uniform_fan_in(embed, embed, rng),
            key: LinearParams::uniform_fan_in(embed, embed, rng),
            value: LinearParams::uniform_fan_in(embed, embed, rng),
            output: LinearParams::zeros(embed, embed),
            bias_table: Tensor::random_trunc_normal(&[bins, heads], 0.02, rng),
            heads,
        })
    }

    pub fn bind(&self, tape: &Tape) -> AttentionVars {
        AttentionVars {
            query: self.query.bind(tape),
            key: self.key.bind(tape),
            value: self.value.bind(tape),
            output: self.output.bind(tape),
            bias_table: tape.leaf(self.bias_table.clone()),
            heads: self.heads,
        }
    }
}

/// Tape handles for one attention block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
    pub bias_table: Var,
    pub heads: usize,
}

/// Fixed index plumbing for one attention site: how `batch` groups of
/// `tokens` tokens split into heads and where each score picks up its bias
/// and mask. Built once per stage and reused every step.
pub struct AttentionGeometry {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub bins: usize,
    split_map: Rc<Vec<i64>>,
    merge_map: Rc<Vec<i64>>,
    bias_map: Rc<Vec<i64>>,
    /// Mask already expanded across heads: `[batch·heads, T, T]`.
    mask: Option<Tensor>,
}

impl AttentionGeometry {
    /// `pair_bins` assigns each ordered token pair (query-major, length T·T)
    /// a row of the bias table; `mask` is the per-group additive mask
    /// `[batch, T, T]` (entries 0 or a large negative number).
    pub fn new(
        batch: usize,
        tokens: usize,
        heads: usize,
        pair_bins: &[i64],
        mask: Option<&Tensor>,
    ) -> Result<AttentionGeometry> {
        if batch == 0 || tokens == 0 || heads == 0 {
            return Err(Error::arg("attention geometry wants positive extents"));
        }
        if pair_bins.len() != tokens * tokens {
            return Err(Error::shape(format!(
                "pair bins: want {} entries for {tokens} tokens, got {}",
                tokens * tokens,
                pair_bins.len()
            )));
        }
        let bins = match pair_bins.iter().max() {
            Some(&m) if m >= 0 && pair_bins.iter().all(|&b| b >= 0) => m as usize + 1,
            _ => return Err(Error::arg("pair bins must be non-negative")),
        };

        // Head split: row (b, h, t) of the [B·f, T, hd] layout reads head h of
        // token (b, t); merge is the inverse arrangement back to [B, T, E].
        let mut split_map = Vec::with_capacity(batch * heads * tokens);
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..tokens {
                    split_map.push(((b * tokens + t) * heads + h) as i64);
                }
            }
        }
        let mut merge_map = Vec::with_capacity(batch * tokens * heads);
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    merge_map.push(((b * heads + h) * tokens + t) as i64);
                }
            }
        }
        // Bias values live in a [bins, heads] table; scores want [f, T, T].
        let mut bias_map = Vec::with_capacity(heads * tokens * tokens);
        for h in 0..heads {
            for &bin in pair_bins {
                bias_map.push(bin * heads as i64 + h as i64);
            }
        }

        let mask = match mask {
            None => None,
            Some(m) => {
                if m.shape() != [batch, tokens, tokens] {
                    return Err(Error::shape(format!(
                        "mask wants [{batch}, {tokens}, {tokens}], got {:?}",
                        m.shape()
                    )));
                }
                let group = tokens * tokens;
                Some(Tensor::from_fn(
                    &[batch * heads, tokens, tokens],
                    |i| {
                        let (bh, r) = (i / group, i % group);
                        m.data()[(bh / heads) * group + r]
                    },
                ))
            }
        };

        Ok(AttentionGeometry {
            batch,
            tokens,
            heads,
            bins,
            split_map: Rc::new(split_map),
            merge_map: Rc::new(merge_map),
            bias_map: Rc::new(bias_map),
            mask,
        })
    }

    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }
}

/// Attention output together with the post-softmax weights (useful for
/// verifying that masked pairs really get no weight).
pub struct AttentionTrace {
    /// `[batch, tokens, E]`.
    pub output: Var,
    /// `[batch·heads, tokens, tokens]`, rows summing to 1.
    pub probs: Var,
}

/// Multi-head scaled dot-product attention over independent token groups:
/// per head, `softmax(Q Kᵀ / √head_dim + bias + mask) V`, heads concatenated
/// and output-projected. `tokens` is `[batch, T, E]`.
pub fn attend(
    tape: &Tape,
    tokens: Var,
    vars: &AttentionVars,
    geo: &AttentionGeometry,
) -> Result<AttentionTrace> {
    let embed = {
        let t = tape.value(tokens);
        if t.shape().len() != 3 || t.shape()[0] != geo.batch || t.shape()[1] != geo.tokens {
            return Err(Error::shape(format!(
                "attention tokens want [{}, {}, E], got {:?}",
                geo.batch,
                geo.tokens,
                t.shape()
            )));
        }
        t.shape()[2]
    };
    if vars.heads != geo.heads {
        return Err(Error::arg(format!(
            "params built for {} heads, geometry for {}",
            vars.heads, geo.heads
        )));
    }
    if embed % geo.heads != 0 {
        return Err(Error::arg(format!(
            "embedding dim {embed} not divisible by {} heads",
            geo.heads
        )));
    }
    {
        let table = tape.value(vars.bias_table);
        if table.shape() != [geo.bins, geo.heads] {
            return Err(Error::shape(format!(
                "bias table wants [{}, {}], got {:?}",
                geo.bins,
                geo.heads,
                table.shape()
            )));
        }
    }
    let head_dim = embed / geo.heads;
    let (b, t, f) = (geo.batch, geo.tokens, geo.heads);

    let q = tape.linear(tokens, vars.query)?;
    let k = tape.linear(tokens, vars.key)?;
    let v = tape.linear(tokens, vars.value)?;
    let split = |x: Var| {
        tape.gather_rows(x, head_dim, Rc::clone(&geo.split_map), &[b * f, t, head_dim])
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);

    let mut scores = tape.scale(tape.bmm_nt(qh, kh)?, 1.0 / (head_dim as f32).sqrt())?;
    let bias = tape.gather_rows(
        vars.bias_table,
        1,
        Rc::clone(&geo.bias_map),
        &[f, t, t],
    )?;
    scores = tape.add_broadcast(scores, bias)?;
    if let Some(mask) = &geo.mask {
        let mask = tape.constant(mask.clone());
        scores = tape.add(scores, mask)?;
    }
    let probs = tape.softmax(scores, 2)?;
    let ctx = tape.bmm_nn(probs, vh)?;
    let merged = tape.gather_rows(ctx, head_dim, Rc::clone(&geo.merge_map), &[b, t, embed])?;
    let output = tape.linear(merged, vars.output)?;
    Ok(AttentionTrace { output, probs })
}
