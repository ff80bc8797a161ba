use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(t: &Tensor) -> Result<Tensor> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("sign of a tensor containing NaN".into()));
    }
    Ok(t.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }))
}

/// Projection onto the l∞ ball of radius `epsilon`.
pub fn clip_box(delta: &Tensor, epsilon: f32) -> Tensor {
    delta.map(|v| v.clamp(-epsilon, epsilon))
}

/// One accumulation step of the l1-normalized momentum buffer:
/// `v_t = μ·v_{t−1} + g_t/‖g_t‖₁`. Returns `(direction, v_t)`, where the
/// direction is `v_t` itself. A zero gradient adds nothing.
pub fn momentum_wrap(gradient: &Tensor, velocity: &Tensor, decay: f32) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("momentum decay must be in [0, 1), got {decay}")));
    }
    if gradient.shape() != velocity.shape() {
        return Err(Error::shape("momentum_wrap", velocity.shape(), gradient.shape()));
    }
    let l1 = gradient.l1_norm();
    let mut next = velocity.scale(decay);
    if l1 > 0.0 {
        next.add_scaled(gradient, 1.0 / l1)?;
    }
    if !next.all_finite() {
        return Err(Error::Numeric("momentum buffer is not finite".into()));
    }
    Ok((next.clone(), next))
}
