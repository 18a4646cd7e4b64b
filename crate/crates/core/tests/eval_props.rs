mod common;

use std::collections::BTreeMap;

use lwtta_core::eval::{mean_se, rouge_lsum, schedule_consistency, Z95};
use lwtta_core::tta::{average_scales, StepRecord, TtaMode, TtaTrace};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rouge_matches_brute_force_on_random_pairs() {
    let words = ["the", "cat", "sat", "on", "mat", "a"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let m = rng.random_range(1..=10);
        let n = rng.random_range(1..=10);
        let a: Vec<&str> = (0..m).map(|_| words[rng.random_range(0..words.len())]).collect();
        let b: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
        let want = common::f_measure(common::brute_lcs(&a, &b), m, n);
        let got = rouge_lsum(&a.join(" "), &b.join(" "));
        assert_eq!(got, want, "case {case}: {a:?} vs {b:?}");
    }
}

#[test]
fn rouge_fixed_examples() {
    assert_eq!(rouge_lsum("the cat sat", "the cat sat"), 1.0);
    assert_eq!(rouge_lsum("dog runs", "the cat sat"), 0.0);
    assert_eq!(rouge_lsum("the cat sat", "the cat ran"), 2.0 / 3.0);
}

#[test]
fn normal_interval_agrees_with_bootstrap() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<f64> = (0..400).map(|_| rng.random::<f64>().powi(2) * 3.0).collect();
    let m = mean_se(&xs);
    let mut means: Vec<f64> = (0..4000)
        .map(|_| (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / xs.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let (lo, hi) = (means[100], means[3899]);
    let (nlo, nhi) = m.ci95();
    assert!((lo - nlo).abs() < 0.25 * Z95 * m.se, "{lo} vs {nlo}");
    assert!((hi - nhi).abs() < 0.25 * Z95 * m.se, "{hi} vs {nhi}");
}

fn trace(id: &str, total: usize, scales: Vec<Vec<f64>>) -> TtaTrace<f64> {
    TtaTrace {
        id: id.into(),
        mode: TtaMode::LayerWise,
        total,
        eta: 0.01,
        steps: scales
            .into_iter()
            .enumerate()
            .map(|(i, s)| StepRecord {
                k: i + 1,
                scales: s,
                net: None,
                prompt_nll: 1.0,
                grads: None,
            })
            .collect(),
        answer_nll: Some(1.0),
        diverged: false,
        lora_norms: vec![],
        final_state: None,
    }
}

#[test]
fn identical_schedules_give_zero_difference() {
    let mut groups = BTreeMap::new();
    for k in 1..=5 {
        let traces = (0..30)
            .map(|e| trace(&format!("e{e}"), k, (0..k).map(|j| vec![1.0 + e as f64 * 0.1 + j as f64; 8]).collect()))
            .collect();
        groups.insert(k, traces);
    }
    let rep = schedule_consistency(&groups, 5).unwrap();
    assert_eq!(rep.rows.len(), 10);
    for r in &rep.rows {
        assert_eq!((r.mean_pct, r.ci_low, r.ci_high), (0.0, 0.0, 0.0));
    }
}

proptest! {
    #[test]
    fn average_scales_is_the_elementwise_mean(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..10.0, 3 * 4), 1..12)
    ) {
        let traces: Vec<_> = raw
            .iter()
            .enumerate()
            .map(|(i, v)| trace(&i.to_string(), 3, v.chunks(4).map(<[f64]>::to_vec).collect()))
            .collect();
        let table = average_scales(&traces).unwrap();
        prop_assert_eq!(table.total, 3);
        for k in 0..3 {
            for b in 0..4 {
                let want = raw.iter().map(|v| v[k * 4 + b]).sum::<f64>() / raw.len() as f64;
                prop_assert!((table.scales[k][b] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rouge_is_symmetric_and_bounded(a in "[abc ]{0,20}", b in "[abc ]{0,20}") {
        let x = rouge_lsum(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, rouge_lsum(&b, &a));
    }
}
