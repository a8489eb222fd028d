use super::params::{ParamId, ParameterStore};
use super::Mat;
use crate::error::{DfnError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            moments: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Frozen tensors are skipped; any non-finite
    /// gradient aborts before anything is written.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[(ParamId, Mat)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(DfnError::NonFinite {
                    context: format!("gradient of '{}'", store.name(*id)),
                });
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let n = g.data.len();
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let values = &mut store.tensor_mut(*id).data;
            for i in 0..n {
                let gi = g.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
