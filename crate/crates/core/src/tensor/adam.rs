//! Named trainable parameters and the Adam optimizer with decoupled weight
//! decay and bias-corrected moments.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor, TensorError};

static PARAM_COUNTER: AtomicU64 = AtomicU64::new(1);

/// A named model parameter. Each parameter gets a process-unique id used to
/// match gradients and optimizer slots back to it.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub uid: u64,
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters join forward passes but never receive gradients or
    /// optimizer updates.
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            uid: PARAM_COUNTER.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            frozen: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    slots: HashMap<u64, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, slots: HashMap::new() }
    }
}

/// One Adam update over `params` using gradients keyed by parameter uid.
/// Parameters without a gradient entry (or frozen ones) are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Param<T>],
    grads: &HashMap<u64, Tensor<T>>,
    config: &AdamConfig,
    state: &mut AdamState<T>,
) -> Result<(), TensorError> {
    if !(config.lr > 0.0) {
        return Err(TensorError::Config(format!("learning rate {} must be positive", config.lr)));
    }
    if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
        return Err(TensorError::Config("betas must lie in [0, 1)".into()));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one_m_b1 = T::from_f64(1.0 - config.beta1);
    let one_m_b2 = T::from_f64(1.0 - config.beta2);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let lr = T::from_f64(config.lr);
    let eps = T::from_f64(config.eps);
    let wd = T::from_f64(config.lr * config.weight_decay);

    for param in params.iter_mut() {
        if param.frozen {
            continue;
        }
        let Some(grad) = grads.get(&param.uid) else { continue };
        if grad.shape() != param.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: grad.shape().to_vec(),
                right: param.value.shape().to_vec(),
            });
        }
        let (m, v) = state
            .slots
            .entry(param.uid)
            .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
        let pd = param.value.data_mut();
        for k in 0..pd.len() {
            let g = grad.data()[k];
            let mk = b1 * m.data()[k] + one_m_b1 * g;
            let vk = b2 * v.data()[k] + one_m_b2 * g * g;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk * inv_bc1;
            let v_hat = vk * inv_bc2;
            let mut p = pd[k];
            p -= lr * (m_hat / (v_hat.sqrt() + eps));
            p -= wd * pd[k];
            pd[k] = p;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("w", Tensor::<f64>::scalar(0.0));
        let mut grads = HashMap::new();
        grads.insert(p.uid, Tensor::scalar(3.7));
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut state = AdamState::new();
        adam_step(&mut [&mut p], &grads, &cfg, &mut state).unwrap();
        // Bias-corrected first step: lr * g / (|g| + eps') with tiny eps.
        let moved = -p.value.item().unwrap();
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut p = Param::new("w", Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.value.clone();
        let mut grads = HashMap::new();
        grads.insert(p.uid, Tensor::zeros(&[3]));
        let mut state = AdamState::new();
        adam_step(&mut [&mut p], &grads, &AdamConfig::default(), &mut state).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn ten_steps_match_scalar_reference() {
        // Minimize f(w) = w^2 from w = 1 with lr 0.1.
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut p = Param::new("w", Tensor::<f64>::scalar(1.0));
        let mut state = AdamState::new();
        for _ in 0..10 {
            let w = p.value.item().unwrap();
            let mut grads = HashMap::new();
            grads.insert(p.uid, Tensor::scalar(2.0 * w));
            adam_step(&mut [&mut p], &grads, &cfg, &mut state).unwrap();
        }

        // Independent scalar implementation.
        let (beta1, beta2, eps, lr) = (0.9f64, 0.999, 1e-8, 0.1);
        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * w;
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t));
            let v_hat = v / (1.0 - beta2.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p.value.item().unwrap() - w).abs() < 1e-10);
    }

    #[test]
    fn frozen_params_and_bad_lr() {
        let mut p = Param::new("w", Tensor::<f64>::scalar(2.0));
        p.frozen = true;
        let mut grads = HashMap::new();
        grads.insert(p.uid, Tensor::scalar(1.0));
        let mut state = AdamState::new();
        adam_step(&mut [&mut p], &grads, &AdamConfig::default(), &mut state).unwrap();
        assert_eq!(p.value.item().unwrap(), 2.0);

        let bad = AdamConfig { lr: 0.0, ..Default::default() };
        assert!(matches!(
            adam_step(&mut [&mut p], &grads, &bad, &mut state),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_params() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = Param::new("w", Tensor::<f64>::scalar(1.0));
        let mut grads = HashMap::new();
        grads.insert(p.uid, Tensor::scalar(0.0));
        let mut state = AdamState::new();
        adam_step(&mut [&mut p], &grads, &cfg, &mut state).unwrap();
        // Pure decay: w <- w - lr*wd*w = 1 - 0.05.
        assert!((p.value.item().unwrap() - 0.95).abs() < 1e-12);
    }
}
