//! Adam and global gradient-norm clipping.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real};

/// Adam with bias correction. Moments are kept per parameter array in the
/// store's order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, a)| vec![T::zero(); a.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr` from the gradients in `params`.
    /// Arrays without a gradient are left alone. A zero learning rate still
    /// advances the moments but leaves the values bit-identical.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Config("optimizer state does not match the parameter store".into()));
        }
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / libm::sqrt(bc2));
        let eps = T::of(self.eps);
        for ((_, a), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = a.grad.as_ref() else { continue };
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                if lr != 0.0 {
                    let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                    a.values[i] -= step_size * m[i] / denom;
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(T::of(max_norm / norm));
    }
    norm
}
