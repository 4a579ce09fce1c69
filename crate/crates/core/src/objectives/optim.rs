use serde::{Deserialize, Serialize};

use crate::encoders::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. Decay applies to matrices and
/// embeddings only, never to biases or norm gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}
