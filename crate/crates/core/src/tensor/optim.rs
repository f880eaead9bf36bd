use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One SGD step with classic momentum:
/// `v ← momentum·v + grad`, then `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    velocity: &mut [Tensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), v.shape()));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        momentum_update(p.data_mut(), g.data(), v.data_mut(), lr, momentum);
    }
    Ok(())
}

pub(crate) fn momentum_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}
