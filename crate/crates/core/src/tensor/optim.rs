use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifies one parameter tensor: owning layer index and role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: usize,
    pub name: &'static str,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} {}", self.layer, self.name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in layer {layer} ({name})")]
    NonFiniteGradient { layer: usize, name: &'static str },
    #[error("{key}: parameter has {param} elements, gradient has {grad}")]
    LengthMismatch { key: ParamKey, param: usize, grad: usize },
}

pub trait Optimizer {
    /// Updates `param` in place from `grad`.
    fn step(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64]) -> Result<(), OptimError>;
}

fn check(key: ParamKey, param: &[f64], grad: &[f64]) -> Result<(), OptimError> {
    if param.len() != grad.len() {
        return Err(OptimError::LengthMismatch {
            key,
            param: param.len(),
            grad: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient {
            layer: key.layer,
            name: key.name,
        });
    }
    Ok(())
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        check(key, param, grad)?;
        for (p, g) in param.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

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
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias-corrected moment estimates, one step counter per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, key: ParamKey, param: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        check(key, param, grad)?;
        let c = self.config;
        let st = self.state.entry(key).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t);
        let bc2 = 1.0 - c.beta2.powi(st.t);
        for i in 0..param.len() {
            let g = grad[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            param[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}
