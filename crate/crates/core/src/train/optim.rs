//! Adam, the inverse-square-root warmup schedule and global-norm clipping.

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.tensor.len()]).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked before any
/// parameter is touched, so a failed step leaves everything unchanged.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut OptimState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!("learning rate {lr} must be positive")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment slots for {} tensors",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (t, g) in params.tensors().iter().zip(grads) {
        if g.len() != t.tensor.len() {
            return Err(Error::dim("adam_step", t.tensor.shape(), &[g.len()]));
        }
        if let Some(x) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("gradient of {} contains {x}", t.name)));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, p) in t.tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 || warmup == 0 {
        return Err(Error::Contract(format!(
            "learning-rate schedule needs step >= 1 and warmup >= 1, got {step} and {warmup}"
        )));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
