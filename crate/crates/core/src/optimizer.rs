//! AdamW with gradient accumulation and an inverse-square-root schedule.
//!
//! ```text
//! g_acc  = sum of mini-batch gradients over the window
//! g      = g_acc / window
//! t      = t + 1
//! m      = b1 m + (1 - b1) g
//! v      = b2 v + (1 - b2) g^2
//! m_hat  = m / (1 - b1^t)
//! v_hat  = v / (1 - b2^t)
//! lr     = eta0 / sqrt(t)
//! theta  = theta - lr m_hat / (sqrt(v_hat) + eps) - lr wd theta
//! ```
//!
//! `t` counts flushes, not mini-batches. Weight decay skips biases and
//! layer-norm parameters (see [`crate::model::is_decayed`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{is_decayed, ModelParams};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("learning-rate schedule is undefined at step 0")]
    InvalidStep,
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("gradient shapes do not match the optimizer state")]
    ShapeMismatch,
    #[error("already accumulated {0} mini-batches; flush first")]
    OverAccumulation(usize),
    #[error("flush needs {expected} accumulated mini-batches, have {have}")]
    IncompleteAccumulation { have: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub eta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub n_acc: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eta0: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            n_acc: 4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.n_acc < 1 {
            return bad("gradient accumulation needs at least one mini-batch");
        }
        Ok(())
    }
}

/// `eta0 / sqrt(t)` for `t >= 1`.
pub fn lr_at(t: u64, eta0: f64) -> Result<f64, OptimError> {
    if t == 0 {
        return Err(OptimError::InvalidStep);
    }
    Ok(eta0 / (t as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    /// Number of completed flushes.
    pub step: u64,
    pub grad_acc: ModelParams<T>,
    pub accumulated: usize,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = params.zeros_like();
        Self {
            m: zeros.clone(),
            v: zeros.clone(),
            step: 0,
            grad_acc: zeros,
            accumulated: 0,
        }
    }

    /// Adds one mini-batch gradient to the accumulation buffer.
    pub fn accumulate(&mut self, grads: &ModelParams<T>, cfg: &OptimConfig) -> Result<(), OptimError> {
        if self.accumulated >= cfg.n_acc {
            return Err(OptimError::OverAccumulation(self.accumulated));
        }
        if !self.grad_acc.shapes_match(grads) {
            return Err(OptimError::ShapeMismatch);
        }
        for ((_, mut acc), (_, g)) in self.grad_acc.tensors_mut().into_iter().zip(grads.tensors()) {
            acc += &g;
        }
        self.accumulated += 1;
        Ok(())
    }

    /// Applies the update for a full window of `n_acc` mini-batches.
    pub fn flush(&mut self, params: &mut ModelParams<T>, cfg: &OptimConfig) -> Result<f64, OptimError> {
        if self.accumulated != cfg.n_acc {
            return Err(OptimError::IncompleteAccumulation {
                have: self.accumulated,
                expected: cfg.n_acc,
            });
        }
        self.apply(params, cfg)
    }

    /// Applies the update for a partial window, dividing by the actual count.
    pub fn flush_partial(&mut self, params: &mut ModelParams<T>, cfg: &OptimConfig) -> Result<f64, OptimError> {
        if self.accumulated == 0 {
            return Err(OptimError::IncompleteAccumulation {
                have: 0,
                expected: cfg.n_acc,
            });
        }
        self.apply(params, cfg)
    }

    /// Returns the learning rate used.
    fn apply(&mut self, params: &mut ModelParams<T>, cfg: &OptimConfig) -> Result<f64, OptimError> {
        cfg.validate()?;
        if !self.m.shapes_match(params) {
            return Err(OptimError::ShapeMismatch);
        }
        self.step += 1;
        let t = self.step;
        let lr_f = lr_at(t, cfg.eta0)?;
        let lr = T::of(lr_f);
        let count = T::of(self.accumulated as f64);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let bc1 = T::of(1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32));
        let eps = T::of(cfg.epsilon);
        let wd = T::of(cfg.weight_decay);

        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        let g_all = self.grad_acc.tensors();
        for (((name, mut theta), (_, m)), ((_, v), (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(m_all.iter_mut())
            .zip(v_all.iter_mut().zip(g_all.iter()))
        {
            let decay = is_decayed(&name) && cfg.weight_decay > 0.0;
            ndarray::Zip::from(&mut theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|th, m, v, &g_sum| {
                    let g = g_sum / count;
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    let step = lr * m_hat / (v_hat.sqrt() + eps);
                    let decay_term = if decay { lr * wd * *th } else { T::zero() };
                    *th = *th - step - decay_term;
                });
        }
        drop(m_all);
        drop(v_all);
        drop(g_all);
        for (_, mut acc) in self.grad_acc.tensors_mut() {
            acc.fill(T::zero());
        }
        self.accumulated = 0;
        Ok(lr_f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            max_len: 4,
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_ff: 2,
            dropout_p: 0.0,
            hidden_dropout_p: 0.0,
            seed: 1,
        }
    }

    fn filled(params: &ModelParams<f64>, value: f64) -> ModelParams<f64> {
        let mut g = params.zeros_like();
        for (_, mut t) in g.tensors_mut() {
            t.fill(value);
        }
        g
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(1, 6e-5).unwrap(), 6e-5);
        assert_eq!(lr_at(4, 6e-5).unwrap(), 3e-5);
        assert_eq!(lr_at(100, 6e-5).unwrap(), 6e-6);
        assert_eq!(lr_at(0, 6e-5).unwrap_err(), OptimError::InvalidStep);
        for t in 1..1000 {
            assert!(lr_at(t + 1, 6e-5).unwrap() < lr_at(t, 6e-5).unwrap());
        }
    }

    #[test]
    fn accumulation_buffer() {
        let cfg = OptimConfig { n_acc: 2, ..OptimConfig::default() };
        let params: ModelParams<f64> = init_params(&tiny()).unwrap();
        let mut state = OptimState::new(&params);
        state.accumulate(&params.zeros_like(), &cfg).unwrap();
        assert_eq!(state.grad_acc, params.zeros_like());
        let mut state = OptimState::new(&params);
        let g = filled(&params, 0.25);
        state.accumulate(&g, &cfg).unwrap();
        state.accumulate(&g, &cfg).unwrap();
        assert_eq!(state.grad_acc, filled(&params, 0.5));
        assert_eq!(state.accumulate(&g, &cfg).unwrap_err(), OptimError::OverAccumulation(2));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn flush_requires_full_window() {
        let cfg = OptimConfig::default();
        let mut params: ModelParams<f64> = init_params(&tiny()).unwrap();
        let mut state = OptimState::new(&params);
        state.accumulate(&params.zeros_like(), &cfg).unwrap();
        assert_eq!(
            state.flush(&mut params, &cfg).unwrap_err(),
            OptimError::IncompleteAccumulation { have: 1, expected: 4 }
        );
        state.flush_partial(&mut params, &cfg).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(state.accumulated, 0);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_without_decay() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            n_acc: 1,
            ..OptimConfig::default()
        };
        let mut params: ModelParams<f64> = init_params(&tiny()).unwrap();
        let before = params.clone();
        let mut state = OptimState::new(&params);
        state.accumulate(&params.zeros_like(), &cfg).unwrap();
        state.flush(&mut params, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn pure_decoupled_decay() {
        let cfg = OptimConfig {
            weight_decay: 0.5,
            n_acc: 1,
            ..OptimConfig::default()
        };
        let mut params: ModelParams<f64> = init_params(&tiny()).unwrap();
        let before = params.clone();
        let mut state = OptimState::new(&params);
        state.accumulate(&params.zeros_like(), &cfg).unwrap();
        state.flush(&mut params, &cfg).unwrap();
        let factor = 1.0 - 6e-5 * 0.5;
        for ((name, new), (_, old)) in params.tensors().into_iter().zip(before.tensors()) {
            for (&a, &b) in new.iter().zip(old.iter()) {
                let expected = if is_decayed(&name) { b - 6e-5 * 0.5 * b } else { b };
                assert_eq!(a, expected, "{name}");
                if is_decayed(&name) {
                    assert!((a - b * factor).abs() <= 1e-15 * b.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            n_acc: 1,
            ..OptimConfig::default()
        };
        let mut params: ModelParams<f64> = init_params(&tiny()).unwrap();
        let before = params.clone();
        let mut state = OptimState::new(&params);
        state.accumulate(&filled(&params, 0.3), &cfg).unwrap();
        state.flush(&mut params, &cfg).unwrap();
        // after bias correction m_hat = g and v_hat = g^2
        let expected_step = 6e-5 * 0.3 / (0.3 + 1e-8);
        for ((_, new), (_, old)) in params.tensors().into_iter().zip(before.tensors()) {
            for (&a, &b) in new.iter().zip(old.iter()) {
                assert!(((b - a) - expected_step).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn second_moment_stays_nonnegative() {
        let cfg = OptimConfig { n_acc: 1, ..OptimConfig::default() };
        let mut params: ModelParams<f64> = init_params(&tiny()).unwrap();
        let mut state = OptimState::new(&params);
        for i in 0..20 {
            let g = filled(&params, if i % 2 == 0 { -1.5 } else { 0.7 });
            state.accumulate(&g, &cfg).unwrap();
            state.flush(&mut params, &cfg).unwrap();
            assert!(state.v.tensors().iter().all(|(_, t)| t.iter().all(|&x| x >= 0.0)));
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        for bad in [
            OptimConfig { eta0: 0.0, ..OptimConfig::default() },
            OptimConfig { beta1: 1.0, ..OptimConfig::default() },
            OptimConfig { epsilon: 0.0, ..OptimConfig::default() },
            OptimConfig { n_acc: 0, ..OptimConfig::default() },
            OptimConfig { weight_decay: -1.0, ..OptimConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(OptimError::InvalidConfig(_))), "{bad:?}");
        }
    }
}
