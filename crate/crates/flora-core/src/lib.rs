//! Zero-shot skeleton action recognition on precomputed feature packs.
//!
//! The pipeline has three learned stages plus shared plumbing:
//!
//! 1. **attune** — semantic class features are sharpened against their
//!    nearest neighbor classes so that confusable classes become easier to
//!    tell apart.
//! 2. **align** — two small VAEs (one per modality) are trained jointly so
//!    skeleton samples and their class semantics land on matching latent
//!    distributions.
//! 3. **flow** — with the aligned latents frozen, a velocity network learns
//!    the straight-line transport from semantic latents to skeleton latents;
//!    classification picks the class whose transport the network reproduces
//!    best.
//!
//! [`numerics`] provides the tensor/tape machinery, [`data`] the feature
//! pack format, synthetic generator, and class splits, and [`predict`] the
//! classifiers, baselines, and metrics. [`pipeline`] wires the stages
//! together for the CLI and the test suite.

// Validators reject NaN by negating comparisons: `!(x > 0.0)` is true for
// NaN where `x <= 0.0` is not. The negated form is load-bearing.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod attune;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod numerics;
pub mod pipeline;
pub mod predict;

pub use error::{Error, ErrorClass, Result};
