use lwtta_core::scalenet::{positive_map, positive_map_grad, scalenet_forward, ScaleHead, ScaleNetConfig, ScaleNetParams};
use proptest::prelude::*;

#[test]
fn positive_map_fixed_points() {
    assert_eq!(positive_map(0.0), 1.0);
    assert_eq!(positive_map(1.0), 2.5);
    assert_eq!(positive_map(-1.0), (-1.0f64).exp());
    assert_eq!(positive_map_grad(0.0), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn positive_and_monotone(a in -50.0f64..50.0, d in 1e-6f64..5.0) {
        prop_assert!(positive_map(a) > 0.0);
        prop_assert!(positive_map(a + d) > positive_map(a));
        prop_assert!(positive_map_grad(a) > 0.0);
    }

    #[test]
    fn derivative_is_continuous_at_zero(e in 1e-12f64..1e-4) {
        // Both one-sided slopes tend to 1, up to cancellation in the quotient.
        let left = (positive_map(0.0) - positive_map(-e)) / e;
        let right = (positive_map(e) - positive_map(0.0)) / e;
        prop_assert!((left - 1.0).abs() <= e + 1e-15 / e);
        prop_assert!((right - 1.0).abs() <= e + 1e-15 / e);
        prop_assert!((positive_map_grad(e) - positive_map_grad(-e)).abs() <= 2.0 * e + 1e-15);
    }

    #[test]
    fn scales_stay_within_clamp_bounds(seed in 0u64..64, k in 1usize..=5, extra in 0usize..5) {
        let total = (k + extra).min(5);
        let cfg = ScaleNetConfig::new(8, 2, ScaleHead::LayerWise);
        let mut psi = ScaleNetParams::<f64>::init(cfg, seed).unwrap();
        psi.b2 = psi.b2.map(|_| 50.0 * if seed % 2 == 0 { 1.0 } else { -1.0 });
        let h: Vec<f64> = (0..16).map(|i| ((i as u64 * 31 + seed) % 7) as f64 - 3.0).collect();
        let st = scalenet_forward(&psi, &h, k, total, 5, 8.0).unwrap();
        prop_assert_eq!(st.scales.len(), 4);
        for s in st.scales {
            prop_assert!(s >= positive_map(-8.0) && s <= positive_map(8.0));
        }
    }
}
