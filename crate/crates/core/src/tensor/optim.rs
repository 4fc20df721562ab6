//! Momentum SGD and Adam. Weight decay enters as an L2 term added to the
//! gradient before the update. State is keyed by position in the parameter
//! list, which is fixed for a given model.

use super::{Parameter, TensorError};

pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Parameter]) -> Result<(), TensorError> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| vec![0.0; p.tensor.len()])
                .collect();
        }
        for (i, p) in params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.tensor.grad().ok_or_else(|| TensorError::MissingGrad {
                name: p.name.clone(),
            })?;
            let mut data = p.tensor.data_mut();
            let v = &mut self.velocity[i];
            for j in 0..data.len() {
                let g = grad[j] + self.weight_decay * data[j];
                v[j] = self.momentum * v[j] + g;
                data[j] -= self.lr * v[j];
            }
        }
        Ok(())
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_defaults(lr: f64) -> Self {
        Adam::new(lr, 0.9, 0.999, 1e-8, 0.0)
    }

    pub fn step(&mut self, params: &[Parameter]) -> Result<(), TensorError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.tensor.grad().ok_or_else(|| TensorError::MissingGrad {
                name: p.name.clone(),
            })?;
            let mut data = p.tensor.data_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j] + self.weight_decay * data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Clear gradients on every parameter, ready for the next backward pass.
pub fn zero_grads(params: &[Parameter]) {
    for p in params {
        p.tensor.zero_grad();
    }
}
