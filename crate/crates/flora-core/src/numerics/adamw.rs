//! AdamW: Adam moment estimation with decoupled multiplicative weight decay.
//!
//! Decay shrinks each parameter by `1 - lr * weight_decay` before the
//! gradient update and never touches the moment estimates, so decay and
//! adaptation stay independent. Bias correction divides the moments by
//! `1 - beta^step`.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_lr_wd(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, ..Self::default() }
    }
}

/// Optimizer state: hyperparameters, shared step counter, and first/second
/// moment buffers aligned with the parameter list given at construction.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(cfg: AdamWConfig, params: &[&Tensor]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over all parameters. `grads[i]` is the gradient of
/// `params[i]`; shapes must match the state layout from construction.
pub fn adamw_step(
    state: &mut AdamWState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Optimizer(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.numel() || p.numel() != state.m[i].len() {
            return Err(Error::Optimizer(format!(
                "param {i}: {} elements, gradient {}, moments {}",
                p.numel(),
                g.numel(),
                state.m[i].len()
            )));
        }
    }

    state.step += 1;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let decay = 1.0 - c.lr * c.weight_decay;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
        {
            *pi *= decay;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        if let Some(j) = pd.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite parameter after optimizer step at flat index {j}"
            )));
        }
    }
    Ok(())
}
