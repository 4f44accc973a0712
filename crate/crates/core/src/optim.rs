use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam over a flat parameter vector with per-entry learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-15, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() || lrs.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer holds {} entries, got params {}, grads {}, lrs {}",
                self.len(),
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lrs[i] * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Rebuilds the moment buffers for a resized parameter set. `sources[k]`
    /// names the old row (of `stride` entries) that new row `k` inherits, or
    /// `None` for fresh zero state.
    pub fn remap(&mut self, stride: usize, sources: &[Option<usize>]) {
        let mut m = vec![0.0; sources.len() * stride];
        let mut v = vec![0.0; sources.len() * stride];
        for (k, src) in sources.iter().enumerate() {
            if let Some(j) = *src {
                m[k * stride..(k + 1) * stride].copy_from_slice(&self.m[j * stride..(j + 1) * stride]);
                v[k * stride..(k + 1) * stride].copy_from_slice(&self.v[j * stride..(j + 1) * stride]);
            }
        }
        self.m = m;
        self.v = v;
    }
}
