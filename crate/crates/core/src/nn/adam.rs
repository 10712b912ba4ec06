use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Dense, Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First and second moment estimates, shaped like the network they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Dense>,
    second_moment: Vec<Dense>,
}

impl AdamState {
    pub fn new(mlp: &Mlp, config: AdamConfig) -> Self {
        let zeros = Gradients::zeros_like(mlp).layers;
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before
/// any parameter is touched.
pub fn adam_step(mlp: &mut Mlp, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.layers.len() != mlp.layers.len()
        || grads
            .layers
            .iter()
            .zip(&mlp.layers)
            .any(|(g, p)| g.weights.dim() != p.weights.dim() || g.bias.dim() != p.bias.dim())
    {
        return Err(Error::Shape("gradient layout does not match network".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    };
    for (((layer, g), m), v) in mlp
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        Zip::from(&mut layer.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut layer.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}
