//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators mirroring the parameter list exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    /// Steps skipped because the gradient was not finite.
    pub skipped: u64,
}

impl<S: Real> OptimizerState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<Tensor<S>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            skipped: 0,
        }
    }
}

/// One AdamW update. Returns `false` (and counts a skip) when any gradient
/// entry is non-finite; parameters and moments are then left untouched.
pub fn adamw_step<S: Real>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut OptimizerState<S>,
    cfg: &AdamWConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "param {:?} / grad {:?} / moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("skipping optimizer step with a non-finite gradient ({} so far)", state.skipped);
        return Ok(false);
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let lr = S::lit(cfg.lr);
    let decay = S::one() - lr * S::lit(cfg.weight_decay);
    let eps = S::lit(cfg.eps);

    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (S::one() - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (S::one() - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *pj = *pj * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

/// Scale gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Real>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = S::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_inplace(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[x]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = scalar(0.7);
        let mut st = OptimizerState::new([&p]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..3 {
            adamw_step(&mut [&mut p], &[scalar(0.0)], &mut st, &cfg).unwrap();
        }
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn zero_gradient_applies_decoupled_decay() {
        let mut p = scalar(2.0);
        let mut st = OptimizerState::new([&p]);
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut [&mut p], &[scalar(0.0)], &mut st, &cfg).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 1e-2 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new([&p]);
        let applied = adamw_step(&mut [&mut p], &[scalar(f64::NAN)], &mut st, &AdamWConfig::default()).unwrap();
        assert!(!applied);
        assert_eq!(st.skipped, 1);
        assert_eq!(st.step, 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new([&p]);
        let g = Tensor::zeros(&[2]);
        assert!(adamw_step(&mut [&mut p], &[g], &mut st, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut gs = vec![scalar(3.0), scalar(4.0)];
        let before = clip_global_norm(&mut gs, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((gs[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((gs[1].data()[0] - 0.8).abs() < 1e-12);
    }
}
