//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// Applies one Adam update in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "adam: param {i} has shape {:?} but grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (S::from_f64(1.0 - cfg.beta1), S::from_f64(1.0 - cfg.beta2));
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (S::from_f64(lr), S::from_f64(cfg.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_once(p0: f64, g: f64, lr: f64) -> f64 {
        let mut p = Tensor::new(vec![1], vec![p0]).unwrap();
        let grads = vec![Tensor::new(vec![1], vec![g]).unwrap()];
        let mut st = AdamState::new(std::slice::from_ref(&p));
        adam_step(&mut [&mut p], &grads, &mut st, lr, &AdamConfig::default()).unwrap();
        p.data()[0]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        assert_eq!(step_once(0.7, 0.0, 0.01), 0.7);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        // m̂ = 1, v̂ = 1 at t = 1, so Δ = -lr / (1 + ε).
        let delta = step_once(0.0, 1.0, 0.001);
        assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::new(vec![3], vec![0.1f32, -0.2, 0.3]).unwrap();
            let g = vec![Tensor::new(vec![3], vec![0.5f32, -1.5, 2.0]).unwrap()];
            let mut st = AdamState::new(std::slice::from_ref(&p));
            for _ in 0..2 {
                adam_step(&mut [&mut p], &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
            }
            p.into_data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let g = vec![Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()];
        let mut st = AdamState::new(std::slice::from_ref(&p));
        assert!(adam_step(&mut [&mut p], &g, &mut st, 1e-3, &AdamConfig::default()).is_err());
    }
}
