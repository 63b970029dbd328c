//! First-order optimizers.
//!
//! SGD with momentum (classical form):
//!   v ← μ·v + g
//!   p ← p − lr·v
//!
//! Adam (bias-corrected):
//!   m ← β₁·m + (1−β₁)·g
//!   v ← β₂·v + (1−β₂)·g²
//!   p ← p − lr · (m / (1−β₁ᵗ)) / (sqrt(v / (1−β₂ᵗ)) + ε)

use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Algorithm {
    pub fn adam() -> Self {
        Algorithm::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct OptimState<S> {
    pub config: OptimConfig,
    pub step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self::new(OptimConfig {
            algorithm: Algorithm::SgdMomentum { momentum },
            learning_rate,
        })
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimConfig {
            algorithm: Algorithm::adam(),
            learning_rate,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Velocity (SGD) or first moment (Adam) slots, in parameter order.
    pub fn velocities(&self) -> &[Tensor<S>] {
        &self.first
    }

    /// Apply one update. Refuses the whole step, leaving parameters and state
    /// untouched, if any gradient is non-finite.
    pub fn step(&mut self, mut params: Vec<&mut Param<S>>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::Numeric(format!("gradient of {} is not finite", p.name)));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            if matches!(self.config.algorithm, Algorithm::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len()
            || params
                .iter()
                .zip(&self.first)
                .any(|(p, v)| p.value.shape() != v.shape())
        {
            return Err(Error::Shape("optimizer state does not match the parameter set".into()));
        }
        self.step += 1;
        let lr = S::of(self.config.learning_rate);
        match self.config.algorithm {
            Algorithm::SgdMomentum { momentum } => {
                let mu = S::of(momentum);
                for (p, v) in params.iter_mut().zip(&mut self.first) {
                    let (val, grad) = (p.value.data_mut(), p.grad.data());
                    for ((x, &g), vel) in val.iter_mut().zip(grad).zip(v.data_mut()) {
                        *vel = mu * *vel + g;
                        *x -= lr * *vel;
                    }
                }
            }
            Algorithm::Adam { beta1, beta2, epsilon } => {
                let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(epsilon));
                let t = self.step as i32;
                let c1 = S::one() - S::of(beta1.powi(t));
                let c2 = S::one() - S::of(beta2.powi(t));
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let (val, grad) = (p.value.data_mut(), p.grad.data());
                    for (((x, &g), mv), vv) in val.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                        *mv = b1 * *mv + (S::one() - b1) * g;
                        *vv = b2 * *vv + (S::one() - b2) * g * g;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new("p", Tensor::full(&[1], v));
        p.grad.fill(g);
        p
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = scalar_param(1.0, 2.0);
        let mut opt = OptimState::sgd(0.1, 0.0);
        opt.step(vec![&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_trace_three_steps() {
        // μ = 0.95, lr = 0.005, g = 1: v = 1, 1.95, 2.8525
        let mut p = scalar_param(0.0, 1.0);
        let mut opt = OptimState::sgd(0.005, 0.95);
        let expect_v = [1.0, 1.95, 2.8525];
        let mut expect_p = 0.0;
        for v in expect_v {
            opt.step(vec![&mut p]).unwrap();
            expect_p -= 0.005 * v;
            assert!((opt.velocities()[0].data()[0] - v).abs() < 1e-12);
            assert!((p.value.data()[0] - expect_p).abs() < 1e-12);
        }
        // drops of 0.005 then 0.00975 over the first two steps
        assert!((expect_p + 0.005 + 0.00975 + 0.005 * 2.8525).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.5, 1.0);
        let mut opt = OptimState::adam(1e-3);
        opt.step(vec![&mut p]).unwrap();
        assert!((0.5 - p.value.data()[0] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_three_step_trace() {
        let grads = [1.0, -2.0, 0.5];
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let mut p = scalar_param(0.0, 0.0);
        let mut opt = OptimState::adam(lr);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            p.grad.fill(*g);
            opt.step(vec![&mut p]).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let k = t as i32 + 1;
            x -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
            assert!((p.value.data()[0] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_refuses_step() {
        let mut a = scalar_param(1.0, 1.0);
        let mut b = scalar_param(2.0, f64::INFINITY);
        let mut opt = OptimState::sgd(0.1, 0.9);
        assert!(matches!(opt.step(vec![&mut a, &mut b]), Err(Error::Numeric(_))));
        assert_eq!(a.value.data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }
}
