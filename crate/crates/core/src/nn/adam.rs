use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

/// Bias-corrected Adam state for one parameter list.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Adam {
            config,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn second_moments(&self) -> &[Array2<S>] {
        &self.v
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or shapes disagree.
    pub fn step(&mut self, params: Vec<&mut Array2<S>>, grads: &[Array2<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dim() != m.dim() || g.dim() != m.dim() {
                return Err(Error::Shape("parameter, gradient and moment shapes differ".into()));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("non-finite gradient; update rejected".into()));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (S::c(c.beta1), S::c(c.beta2));
        let bc1 = S::c(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = S::c(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (S::c(c.lr), S::c(c.eps));
        let one = S::one();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
