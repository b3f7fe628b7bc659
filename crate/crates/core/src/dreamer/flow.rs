//! Flow-matching objective and Euler sampling for any velocity field.

use super::{ConditioningBundle, DiT, DreamerError, Result};
use crate::latent::LatentTensor;

/// A (possibly learned) velocity field `v(z_t, t, c)`.
pub trait VelocityField {
    fn velocity(&self, z: &LatentTensor, t: f64, c: &ConditioningBundle) -> Result<LatentTensor>;
}

impl VelocityField for DiT {
    fn velocity(&self, z: &LatentTensor, t: f64, c: &ConditioningBundle) -> Result<LatentTensor> {
        DiT::velocity(self, z, t, c)
    }
}

/// Adapts a closure into a [`VelocityField`].
pub struct FnField<F>(pub F);

impl<F> VelocityField for FnField<F>
where
    F: Fn(&LatentTensor, f64, &ConditioningBundle) -> Result<LatentTensor>,
{
    fn velocity(&self, z: &LatentTensor, t: f64, c: &ConditioningBundle) -> Result<LatentTensor> {
        (self.0)(z, t, c)
    }
}

/// Mean squared error between `v(z_t, t, c)` and `z1 - z0` on the linear path
/// `z_t = (1 - t) z0 + t z1`.
pub fn flow_matching_loss<M: VelocityField + ?Sized>(
    model: &M,
    z0: &LatentTensor,
    z1: &LatentTensor,
    t: f64,
    c: &ConditioningBundle,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DreamerError::BadT(t));
    }
    if z0.dims() != z1.dims() {
        return Err(DreamerError::ShapeMismatch(format!("z0 {:?} vs z1 {:?}", z0.dims(), z1.dims())));
    }
    let zt = super::model::lerp(z0, z1, t);
    let v = model.velocity(&zt, t, c)?;
    if v.dims() != z0.dims() {
        return Err(DreamerError::ShapeMismatch(format!("velocity {:?} vs latent {:?}", v.dims(), z0.dims())));
    }
    let n = v.data().len() as f64;
    Ok(v.data().iter().zip(z0.data()).zip(z1.data()).map(|((v, a), b)| (v - (b - a)).powi(2)).sum::<f64>() / n)
}

/// Explicit Euler integration of `dz/dt = v` from `t = 0` to `1` in `steps`
/// uniform steps.
pub fn euler_sample<M: VelocityField + ?Sized>(
    model: &M,
    z_init: &LatentTensor,
    c: &ConditioningBundle,
    steps: usize,
) -> Result<LatentTensor> {
    if steps == 0 {
        return Err(DreamerError::ZeroSteps);
    }
    let dt = 1.0 / steps as f64;
    let mut z = z_init.clone();
    for k in 0..steps {
        let v = model.velocity(&z, k as f64 * dt, c)?;
        for (a, b) in z.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
    }
    Ok(z)
}
