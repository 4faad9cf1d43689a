use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        }
    }
}

/// Adam moments and hyperparameters.
///
/// Weight decay is applied as an L2 term added to the gradient before the
/// moment updates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn ensure_buffers(&mut self, params: &[Parameter]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.second = self.first.clone();
            return Ok(());
        }
        if self.first.len() != params.len() || self.first.iter().zip(params).any(|(m, p)| m.len() != p.tensor.len()) {
            return Err(Error::invalid(
                "adam: parameter list changed shape since the first step",
            ));
        }
        Ok(())
    }
}

/// One Adam update over `params`, then zeroes their gradients.
///
/// Fails without touching anything if some parameter has no gradient.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    state.ensure_buffers(params)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j] + state.weight_decay * *w;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        p.tensor.zero_grad();
    }
    Ok(())
}
