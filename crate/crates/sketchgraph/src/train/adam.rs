//! Adam with bias correction, one state slot per parameter tensor.

use crate::error::{SgError, SgResult};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..Default::default() }
    }
}

/// First/second moment estimates for one flat parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        AdamSlot { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update in place. A non-finite gradient rejects the whole step:
    /// parameters and moments stay untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], hp: &AdamParams) -> SgResult<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(SgError::shape(
                "adam_step",
                format!(
                    "slot holds {} entries, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(SgError::NonFinite("gradient in adam_step".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * g;
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        Ok(())
    }
}
