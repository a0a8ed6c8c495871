use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 weight. Coupled (added to the gradient) unless `decoupled`.
    pub l2: f64,
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-4,
            decoupled: false,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, AdamMoments>,
}

impl Adam {
    /// Optimizer with zeroed moments for every parameter in `params`.
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let state = params
            .iter()
            .map(|(name, t)| {
                let n = t.numel();
                (
                    name.to_string(),
                    AdamMoments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        step: 0,
                    },
                )
            })
            .collect();
        Adam { config, state }
    }

    pub fn moments(&self, name: &str) -> Option<&AdamMoments> {
        self.state.get(name)
    }

    /// One update of every parameter. A parameter without a gradient entry
    /// is updated with a zero gradient (momentum and L2 still apply).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if let Some(name) = grads.keys().find(|k| !self.state.contains_key(*k)) {
            return Err(Error::Config(format!("no optimizer state for parameter `{name}`")));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            l2,
            decoupled,
        } = self.config;
        for (name, p) in params.iter_mut() {
            let st = self
                .state
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no optimizer state for parameter `{name}`")))?;
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam_step", p.shape(), g.shape()));
                }
            }
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let wv = *w as f64;
                let mut gi = g.map_or(0.0, |g| g.data()[i] as f64);
                if !decoupled {
                    gi += l2 * wv;
                }
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let mut next = wv - lr * mhat / (vhat.sqrt() + eps);
                if decoupled {
                    next -= lr * l2 * wv;
                }
                *w = next as f32;
            }
        }
        Ok(())
    }
}
