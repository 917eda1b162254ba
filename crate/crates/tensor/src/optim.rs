//! AdamW with a linearly decaying learning rate.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the rate decays linearly to zero; `0` keeps it
    /// constant.
    pub decay_horizon: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_horizon: 0,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

impl AdamW {
    /// Learning rate used for the update numbered `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.decay_horizon == 0 {
            return self.lr;
        }
        let frac = 1.0 - step as f64 / self.decay_horizon as f64;
        self.lr * frac.max(0.0)
    }

    /// Applies one decoupled-weight-decay Adam update in place.
    pub fn step<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        state: &mut OptimizerState<T>,
    ) -> Result<()> {
        if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "optimizer got {} grads / {} moments for {} parameters",
                grads.len(),
                state.m.len(),
                params.len()
            )));
        }
        for (i, (_, name, p)) in params.iter().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
                return Err(TensorError::shape("adamw", format!("`{name}` shapes disagree")));
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGrad { name: name.to_string() });
            }
        }
        let lr = T::lit(self.lr_at(state.step));
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let wd = T::lit(self.weight_decay);
        let eps = T::lit(self.eps);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                *w -= lr * wd * *w;
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
