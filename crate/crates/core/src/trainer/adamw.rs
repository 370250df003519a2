use crate::error::Result;
use crate::lfdn::{to_f32_grid, GradientBuffer, LfdnParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: LfdnParams,
    pub v: LfdnParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(params: &LfdnParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One AdamW step: `theta -= lr * wd * theta`, then the bias-corrected Adam
/// step. Results are rounded to `f32` precision.
pub fn adamw_update(
    params: &mut LfdnParams,
    grads: &GradientBuffer,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((theta, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..theta.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = to_f32_grid(theta[i] * decay - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}
