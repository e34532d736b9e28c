//! ADAM with bias correction.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("adam: parameter {index} has a non-finite gradient")]
    NonFiniteGradient { index: usize },
    #[error("adam: parameter {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("adam: parameter {index} has {got} elements, state expects {expected}")]
    ShapeMismatch { index: usize, got: usize, expected: usize },
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    /// Fresh state for parameters of the given element counts.
    pub fn new(config: AdamConfig, lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            config,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to `params` using their `grad` slots.
    ///
    /// All gradients are validated before any parameter moves, so a rejected
    /// step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), OptimError> {
        for (index, p) in params.iter().enumerate() {
            let expected = self.m.get(index).map_or(0, Vec::len);
            if p.len() != expected || index >= self.m.len() {
                return Err(OptimError::ShapeMismatch { index, got: p.len(), expected });
            }
            let g = p.grad.as_ref().ok_or(OptimError::MissingGradient { index })?;
            if g.len() != expected {
                return Err(OptimError::ShapeMismatch { index, got: g.len(), expected });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient { index });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (index, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take().expect("validated");
            let (m, v) = (&mut self.m[index], &mut self.v[index]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
