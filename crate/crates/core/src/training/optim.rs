use super::config::TrainConfig;
use crate::architecture::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Adam moments per parameter and the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Whether weight decay applies to a parameter of this kind.
pub fn decays(kind: ParamKind, c: &TrainConfig) -> bool {
    match kind {
        ParamKind::Matrix => true,
        ParamKind::Gain => false,
        ParamKind::Scalar => c.decay_scalars,
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64, c: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients, {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.param(i).value.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", params.param(i).name)));
        }
        if !g.is_finite() {
            return Err(Error::Diverged {
                step: state.step as usize + 1,
                detail: format!("non-finite gradient for {}", params.param(i).name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (c.adam_beta1, c.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let decay = if decays(params.param(i).kind, c) { lr * c.weight_decay } else { 0.0 };
        let p = params.value_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            p[j] -= decay * p[j];
            p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.adam_eps);
        }
    }
    Ok(())
}
