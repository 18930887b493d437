//! Differentiable primitive operations recorded on the [`crate::tape::Tape`].
//!
//! Each submodule adds methods to `Tape`:
//! - [`elementwise`]: pointwise arithmetic and activations.
//! - [`norm`]: softmax and layer norm.
//! - [`linalg`]: linear maps, the GELU MLP, batched matmuls.
//! - [`shape`]: reshapes, row gathers, broadcasts, reductions.
//! - [`sample`]: bilinear image sampling.

pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod sample;
pub mod shape;

pub use linalg::{LinearParams, LinearVars};
pub use norm::{LayerNormParams, LayerNormVars};

use crate::error::{Error, Result};

pub(crate) fn ensure_same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}
