//! Numeric foundation: tensors, reverse-mode differentiation, the AdamW
//! optimizer, and deterministic seeded randomness.

pub mod adamw;
pub mod linear;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use linear::{Linear, LinearBound};
pub use rng::{DrawCounts, Rng};
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
