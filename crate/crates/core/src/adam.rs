//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            ..Adam::default()
        }
    }

    /// One update from the accumulated gradients, which are zeroed after.
    ///
    /// Every gradient is checked before anything is written, so a
    /// non-finite gradient leaves the store untouched.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        for (name, e) in store.entries() {
            if !e.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let t = store.bump_step() as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (_, e) in store.entries_mut() {
            let n = e.value.len();
            let (value, grad) = (e.value.data_mut(), e.grad.data_mut());
            let (m, v) = (e.adam_m.data_mut(), e.adam_v.data_mut());
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step(store: &mut ParamStore, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    Adam {
        learning_rate,
        beta1,
        beta2,
        eps,
    }
    .step(store)
}
