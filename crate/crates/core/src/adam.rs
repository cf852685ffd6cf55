//! Adam with bias correction, plus the staircase learning-rate schedule
//! used during layer-model training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl AdamState {
    /// Zero moments with the default hyperparameters (0.9, 0.999, 1e-8).
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: Real) -> Result<()> {
    param.same_shape(grad, "adam_step gradient")?;
    param.same_shape(&state.first_moment, "adam_step state")?;
    grad.ensure_finite("adam_step gradient")?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.ensure_finite("adam_step parameter")?;
    Ok(())
}

/// `initial * decay^floor(t / every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: Real,
    pub decay: Real,
    pub every: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 1e-3, decay: 0.9, every: 500 }
    }
}

impl LrSchedule {
    pub fn at(&self, iteration: u64) -> Real {
        if self.every == 0 {
            return self.initial;
        }
        self.initial * self.decay.powi((iteration / self.every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) || !(self.decay > 0.0) {
            return Err(Error::config("learning rate and decay must be positive"));
        }
        Ok(())
    }
}
