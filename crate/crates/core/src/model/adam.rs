use serde::{Deserialize, Serialize};

use super::{ScorerParams, Weights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for every weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Weights,
    pub second: Weights,
}

impl AdamState {
    pub fn new(config: AdamConfig, like: &Weights) -> Self {
        AdamState {
            config,
            step: 0,
            first: like.zeros_like(),
            second: like.zeros_like(),
        }
    }
}

/// One bias-corrected ADAM update of `params` with `grads`.
pub fn adam_step(state: &mut AdamState, params: &mut ScorerParams, grads: &Weights) -> Result<()> {
    if !params.weights.same_shape(grads) || !state.first.same_shape(grads) {
        return Err(Error::invalid(
            "gradient, moment and parameter shapes disagree",
        ));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let tensors = params
        .weights
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    params.touch();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScorerConfig;

    fn params() -> ScorerParams {
        ScorerParams::init(
            ScorerConfig {
                input_dim: 2,
                hidden: 3,
                layers: 1,
                bidirectional: true,
                behaviors: 2,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let before = p.weights.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p.weights);
        adam_step(&mut st, &mut p, &before.zeros_like()).unwrap();
        assert_eq!(p.weights, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let mut p = params();
        let before = p.weights.clone();
        let mut g = before.zeros_like();
        for (i, t) in g.tensors_mut().into_iter().enumerate() {
            t.fill(if i % 2 == 0 { 0.37 } else { -2.5 });
        }
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &p.weights);
        adam_step(&mut st, &mut p, &g).unwrap();
        for ((after, before), g) in p
            .weights
            .tensors()
            .iter()
            .zip(before.tensors())
            .zip(g.tensors())
        {
            for i in 0..after.len() {
                let step = after[i] - before[i];
                // m_hat = g, v_hat = g^2 => step = -lr * g / (|g| + eps)
                let expected = -0.01 * g[i] / (g[i].abs() + 1e-8);
                assert!((step - expected).abs() < 1e-12, "{step} vs {expected}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = params();
        let other = ScorerParams::init(
            ScorerConfig {
                input_dim: 3,
                hidden: 3,
                layers: 1,
                bidirectional: true,
                behaviors: 2,
            },
            3,
        )
        .unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &p.weights);
        assert!(adam_step(&mut st, &mut p, &other.weights).is_err());
    }
}
