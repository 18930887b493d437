//! Multi-view stereo cost aggregation with depth-aware windowed transformers.
//!
//! This crate is a self-contained CPU implementation of a plane-sweep stereo
//! pipeline whose cost volumes are refined by two residual transformer stages:
//! a 3D windowed transformer over the grouped correlation volume, and a 2D
//! windowed transformer over the reduced single-channel cost (depth treated as
//! channels) just before soft-argmin depth regression.
//!
//! Everything is built on a small reverse-mode autodiff tape ([`tape::Tape`])
//! over dense `f32` tensors ([`tensor::Tensor`]). There is no external ML
//! framework; gradients of every operation are validated against central
//! finite differences ([`gradcheck`]).
//!
//! Module map:
//! - [`tensor`], [`tape`], [`ops`]: the tensor type, the autodiff tape and the
//!   differentiable primitives (softmax, layer norm, linear, GELU MLP,
//!   bilinear sampling, gathers, matmuls).
//! - [`geometry`]: camera model, differentiable homography warping, depth
//!   hypothesis generation and refinement.
//! - [`cost_volume`]: group-wise correlation, view fusion, group reduction and
//!   adaptive spatial cost aggregation.
//! - [`windows`]: 3D (shifted-)window partitioning, attention masks and
//!   relative-position bias index maps shared by both transformers.
//! - [`attention`], [`rdact`], [`rrt`]: windowed multi-head attention and the
//!   two residual transformer stacks.
//! - [`regression`]: soft-argmin depth regression and the training loss.
//! - [`features`], [`synthetic`], [`pipeline`]: the small shared-weight CNN
//!   feature extractor, procedural scene generation, and the coarse-to-fine
//!   multi-stage pipeline with its training loop.
//! - [`checkpoint`], [`pfm`], [`config`]: persistence and file formats.
//! - [`bench`]: windowed-vs-global attention scaling measurements.
//!
//! Parallelism: hot loops fan out over pixels/windows/rows via rayon when the
//! `parallel` feature (default) is enabled. Each output element is produced by
//! exactly one task and every reduction runs in a fixed order, so results are
//! bit-identical across thread counts and with the sequential fallback (see
//! [`parallel`]).

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cost_volume;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gradcheck;
pub mod ops;
pub mod parallel;
pub mod pfm;
pub mod pipeline;
pub mod rdact;
pub mod regression;
pub mod rrt;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod windows;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
