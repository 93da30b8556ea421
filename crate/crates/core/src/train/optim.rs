use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Velocity buffers, one per trainable tensor, zero at creation.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            velocities: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn velocities(&self) -> &[Tensor<T>] {
        &self.velocities
    }
}

/// Classical momentum: `v ← μ·v + g`, then `θ ← θ − η·v`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    learning_rate: T,
    momentum: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::Argument(format!(
            "sgd step over {} parameters, {} gradients and {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocities) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_momentum_step", p.shape(), g.shape()));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocities.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= learning_rate * *vv;
        }
    }
    Ok(())
}

/// Domain-loss weight for epoch `m` of `total`: `2/(1+exp(−10r)) − 1`, `r = m/total·α`.
pub fn lambda_schedule(m: usize, total: usize, alpha: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Argument("lambda schedule needs at least one epoch".into()));
    }
    if m > total {
        return Err(Error::Argument(format!("epoch {m} exceeds total {total}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::Argument(format!("alpha must be positive, got {alpha}")));
    }
    let r = m as f64 / total as f64 * alpha;
    // Large r rounds to exactly 1 in f64; keep the value strictly below it.
    Ok((2.0 / (1.0 + (-10.0 * r).exp()) - 1.0).min(1.0 - f64::EPSILON / 2.0))
}
