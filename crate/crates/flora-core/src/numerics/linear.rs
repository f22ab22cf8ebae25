//! Affine layer: weights `[fan_in, fan_out]` plus a row bias.

use crate::error::Result;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, ValueId};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

/// Tape ids of one bound layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearBound {
    pub w: ValueId,
    pub b: ValueId,
}

impl Linear {
    /// Fan-in uniform init: weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// zero bias.
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_symmetric(bound))
            .collect();
        Self {
            w: Tensor::from_vec(vec![fan_in, fan_out], w)
                .expect("init data is finite by construction")
                .with_requires_grad(),
            b: Tensor::zeros(vec![fan_out]).with_requires_grad(),
        }
    }

    /// All-zero layer; used for output projections that must start as the
    /// zero map.
    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![fan_in, fan_out]).with_requires_grad(),
            b: Tensor::zeros(vec![fan_out]).with_requires_grad(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    /// Bind onto a tape, honoring each tensor's requires_grad flag (frozen
    /// layers bind as constants).
    pub fn bind(&self, tape: &mut Tape) -> Result<LinearBound> {
        let w = if self.w.requires_grad() { tape.param(&self.w)? } else { tape.input(&self.w)? };
        let b = if self.b.requires_grad() { tape.param(&self.b)? } else { tape.input(&self.b)? };
        Ok(LinearBound { w, b })
    }

    /// Bind as constants regardless of training flags (pure inference).
    pub fn bind_const(&self, tape: &mut Tape) -> Result<LinearBound> {
        Ok(LinearBound { w: tape.input(&self.w)?, b: tape.input(&self.b)? })
    }

    /// `x @ w + b` on the tape.
    pub fn apply(&self, tape: &mut Tape, bound: LinearBound, x: ValueId) -> Result<ValueId> {
        let xw = tape.matmul(x, bound.w)?;
        tape.add_row(xw, bound.b)
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.w.set_requires_grad(flag);
        self.b.set_requires_grad(flag);
    }
}
