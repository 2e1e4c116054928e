//! Adam with bias correction.

use maae_tensor::{Real, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Adam { config, step: 0, m, v }
    }

    pub fn first_moments(&self) -> &[Tensor<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<F>] {
        &self.v
    }

    /// Applies one update; `params` and `grads` are aligned with the
    /// tensors the optimizer was created with.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<F>>, grads: &[Tensor<F>]) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = F::from_f64_lossy;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let (lr, bc1, bc2) = (f(c.lr), f(bc1), f(bc2));
        let mut count = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            p.check_same_shape(g, "adam_step")?;
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            count += 1;
        }
        assert_eq!(count, self.m.len(), "adam_step: parameter count changed");
        Ok(())
    }
}
