mod common;

use lwtta_core::lora::answer_grad;
use lwtta_core::meta::{meta_gradient, train_scalenet, MetaConfig};
use lwtta_core::scalenet::ScaleHead;
use lwtta_core::tensor::relative_error;
use lwtta_core::tta::{adapt_batch, adapt_episode, seed_for, taylor_residual, ScaleSource, TtaConfig, TtaMode};
use lwtta_core::lora::LoraConfig;

fn meta_cfg(mode: TtaMode, k: usize) -> TtaConfig {
    TtaConfig {
        mode,
        eta: 0.5,
        steps: k,
        lora: LoraConfig {
            sigma: 0.3,
            ..LoraConfig::default()
        },
        ..TtaConfig::default()
    }
}

fn check_meta_gradient(head: ScaleHead, mode: TtaMode, seed: u64) -> f64 {
    let params = common::tiny_model(seed);
    let psi = common::random_psi(&params, head, seed + 1);
    let ep = &common::episodes(1, seed + 2)[0];
    let cfg = meta_cfg(mode, 3);
    let s = seed_for(0, ep);
    let trace = adapt_episode(&params, ScaleSource::Net(&psi), ep, &cfg, s).unwrap();
    assert!(!trace.diverged);
    let (_, gy) = answer_grad(&params, trace.final_state.as_ref().unwrap(), ep).unwrap();
    let analytic: Vec<f64> = meta_gradient(&trace, &gy, &psi, cfg.eta)
        .unwrap()
        .tensors()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let numeric = common::surrogate_fd(&params, &psi, &trace, ep, &cfg, s, 1e-5);
    relative_error(&analytic, &numeric).into_iter().fold(0.0, f64::max)
}

#[test]
fn layer_wise_meta_gradient_matches_surrogate() {
    let e = check_meta_gradient(ScaleHead::LayerWise, TtaMode::LayerWise, 10);
    assert!(e < 1e-3, "{e:e}");
}

#[test]
fn step_wise_meta_gradient_matches_surrogate() {
    let e = check_meta_gradient(ScaleHead::StepWise, TtaMode::StepWise, 20);
    assert!(e < 1e-3, "{e:e}");
}

#[test]
fn permuted_batches_give_identical_traces() {
    let params = common::tiny_model(1);
    let psi = common::random_psi(&params, ScaleHead::LayerWise, 2);
    let eps = common::episodes(24, 3);
    let cfg = meta_cfg(TtaMode::LayerWise, 2);
    let a = adapt_batch(&params, ScaleSource::Net(&psi), &eps, &cfg, 5).unwrap();
    let mut rev = eps.clone();
    rev.reverse();
    let mut b = adapt_batch(&params, ScaleSource::Net(&psi), &rev, &cfg, 5).unwrap();
    b.reverse();
    assert_eq!(a, b);
}

#[test]
fn taylor_residual_is_second_order() {
    let params = common::tiny_model(7);
    let lora = common::random_lora(&params, 8);
    let ep = &common::episodes(1, 9)[0];
    let etas: Vec<f64> = (0..9).map(|i| 10f64.powf(-4.0 + 0.25 * i as f64)).collect();
    let r = taylor_residual(&params, &lora, ep, &etas).unwrap();
    assert!((r.slope - 2.0).abs() <= 0.3, "slope {}", r.slope);
}

#[test]
fn short_meta_training_is_deterministic() {
    let params = common::tiny_model(2);
    let eps = common::episodes(40, 4);
    let meta = MetaConfig {
        episodes: 12,
        k_max: 3,
        ..MetaConfig::default()
    };
    let cfg = TtaConfig {
        k_max: 3,
        ..meta_cfg(TtaMode::LayerWise, 1)
    };
    let (a, log_a) = train_scalenet(&params, &eps, &eps[..5], &meta, &cfg, ScaleHead::LayerWise).unwrap();
    let (b, log_b) = train_scalenet(&params, &eps, &eps[..5], &meta, &cfg, ScaleHead::LayerWise).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.rows.len(), 12);
    assert!(a.is_finite());
}
