use lwtta_core::optim::{adamw_step, AdamWConfig, OptimizerState};
use lwtta_core::Tensor;
use proptest::prelude::*;

/// The textbook scalar AdamW recursion with decoupled decay.
fn reference(theta0: f64, grads: &[f64], c: &AdamWConfig) -> f64 {
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        th -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * th);
    }
    th
}

proptest! {
    #[test]
    fn matches_scalar_recursion(theta0 in -3.0f64..3.0, grads in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let cfg = AdamWConfig { lr: 1e-2, weight_decay: 0.1, ..AdamWConfig::default() };
        let mut p = Tensor::from_vec(vec![theta0]);
        let mut st = OptimizerState::new([&p]);
        for g in &grads {
            prop_assert!(adamw_step(&mut [&mut p], &[Tensor::from_vec(vec![*g])], &mut st, &cfg).unwrap());
        }
        let want = reference(theta0, &grads, &cfg);
        prop_assert!((p.data()[0] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn non_finite_gradient_skips_the_step() {
    let cfg = AdamWConfig::default();
    let mut p = Tensor::from_vec(vec![1.0f64, 2.0]);
    let mut st = OptimizerState::new([&p]);
    let ok = adamw_step(&mut [&mut p], &[Tensor::from_vec(vec![f64::NAN, 0.0])], &mut st, &cfg).unwrap();
    assert!(!ok);
    assert_eq!(p.data(), &[1.0, 2.0]);
    assert_eq!((st.step, st.skipped), (0, 1));
}
