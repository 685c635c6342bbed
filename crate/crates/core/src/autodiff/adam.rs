use alloc::{format, vec, vec::Vec};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `p *= 1 - lr * weight_decay`.
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the moment update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates, lazily sized on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    /// One AdamW update. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                context: "adam gradient list",
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, (g, t)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.len() != t.len() {
                return Err(Error::Dimension {
                    context: "adam gradient",
                    expected: t.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{}`",
                    params.names()[i]
                )));
            }
        }
        let mut grads = grads.to_vec();
        let norm = match self.config.max_grad_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>()),
        };
        let st = &mut self.state;
        if st.m.is_empty() {
            st.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            st.v = st.m.clone();
        }
        st.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, st.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, st.t as f64);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut st.m[k], &mut st.v[k], &grads[k]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p *= 1.0 - lr * weight_decay;
                *p -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
        Ok(norm)
    }
}
