use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    // check before mutating anything
    for (name, value) in store.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingGrad(name.to_string()))?;
        if g.shape() != value.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter is {:?}",
                g.shape(),
                value.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let g = grads[&name].data();
        let n = g.len();
        let mom = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let p = store.get_mut(id).data_mut();
        for j in 0..n {
            mom.m[j] = cfg.beta1 * mom.m[j] + (1.0 - cfg.beta1) * g[j];
            mom.v[j] = cfg.beta2 * mom.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = mom.m[j] / bc1;
            let v_hat = mom.v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
