//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Post-tuning learning rate.
pub const DEFAULT_LR: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: DEFAULT_LR, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        AdamMoments { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

impl Adam {
    pub fn with_lr(lr: f32) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// One update of `param` given its gradient. Returns the new parameter as
    /// a fresh leaf with the same dtype and trainability.
    pub fn step(&self, name: &str, param: &Tensor, grad: &[f32], moments: &mut AdamMoments) -> Result<Tensor> {
        if grad.len() != param.numel() || moments.m.len() != param.numel() {
            return Err(TensorError::ElementCount { shape: param.shape().to_vec(), len: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGradient { name: name.to_string() });
        }
        moments.step += 1;
        let t = moments.step as i32;
        let (b1, b2) = (self.beta1 as f64, self.beta2 as f64);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let (lr, eps) = (self.lr as f64, self.eps as f64);
        let mut values = param.to_vec();
        for (((p, &g), m), v) in values.iter_mut().zip(grad).zip(&mut moments.m).zip(&mut moments.v) {
            let g = g as f64;
            *m = (b1 * *m as f64 + (1.0 - b1) * g) as f32;
            *v = (b2 * *v as f64 + (1.0 - b2) * g * g) as f32;
            let m_hat = *m as f64 / bias1;
            let v_hat = *v as f64 / bias2;
            *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
        let updated = Tensor::new(values, param.shape())?.to_dtype(param.dtype());
        Ok(updated.with_requires_grad(param.requires_grad()))
    }
}

/// Applies one Adam update to every parameter that has a gradient, creating
/// moment state on first use. Parameters without a gradient are left alone.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut BTreeMap<String, AdamMoments>,
    adam: &Adam,
) -> Result<()> {
    for (name, grad) in grads {
        let Some(param) = params.get(name) else { continue };
        let moments = state
            .entry(name.clone())
            .or_insert_with(|| AdamMoments::zeros(param.numel()));
        let updated = adam.step(name, param, grad, moments)?;
        params.insert(name.clone(), updated);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_learning_rate_is_post_tuning_rate() {
        assert_eq!(Adam::default().lr, 1e-5);
    }

    #[test]
    fn zero_gradient_from_zero_state_is_a_no_op() {
        let p = Tensor::new(vec![0.5, -0.25], &[2]).unwrap();
        let mut m = AdamMoments::zeros(2);
        let out = Adam::default().step("w", &p, &[0.0, 0.0], &mut m).unwrap();
        assert!(out.bit_eq(&p));
        assert_eq!(m.m, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let p = Tensor::new(vec![0.5], &[1]).unwrap();
        let mut m = AdamMoments { step: 3, m: vec![0.2], v: vec![0.04] };
        Adam::default().step("w", &p, &[0.0], &mut m).unwrap();
        assert!(m.m[0] < 0.2 && m.m[0] > 0.0);
        assert!(m.v[0] < 0.04 && m.v[0] > 0.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let p = Tensor::new(vec![0.0], &[1]).unwrap();
        let err = Adam::default().step("blk.w", &p, &[f32::NAN], &mut AdamMoments::zeros(1)).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { name: "blk.w".into() });
    }
}
