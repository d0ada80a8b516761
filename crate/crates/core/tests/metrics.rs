use fdkf_core::metrics::{erle, log_mse, misalignment, ErleConfig, MISALIGNMENT_FLOOR_DB};
use proptest::prelude::*;

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

#[test]
fn unprocessed_signal_has_zero_erle() {
    let d: Vec<f64> = (0..2000).map(|n| (n as f64 * 0.37).sin()).collect();
    let trace = erle(&d, &vec![0.0; d.len()], &ErleConfig::default()).unwrap();
    // Three time constants of the smoother.
    assert!(trace[300..].iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn unit_residual_energy_has_zero_log_mse() {
    let e = [0.6, 0.0, 0.8];
    assert_eq!(log_mse(&e, &[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn erle_is_invariant_to_common_scaling(
        (d, d_hat) in (1usize..400).prop_flat_map(|n| (signal(n), signal(n))),
        scale in 1e-3f64..1e3,
    ) {
        let cfg = ErleConfig::default();
        let base = erle(&d, &d_hat, &cfg).unwrap();
        let sd: Vec<f64> = d.iter().map(|v| v * scale).collect();
        let sh: Vec<f64> = d_hat.iter().map(|v| v * scale).collect();
        let scaled = erle(&sd, &sh, &cfg).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn misalignment_is_invariant_to_consistent_reordering(
        (h, h_hat, perm) in (1usize..64).prop_flat_map(|n| (
            signal(n),
            signal(n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )),
    ) {
        let ph: Vec<f64> = perm.iter().map(|&i| h[i]).collect();
        let pe: Vec<f64> = perm.iter().map(|&i| h_hat[i]).collect();
        match (misalignment(&h, &h_hat), misalignment(&ph, &pe)) {
            (Some(a), Some(b)) => prop_assert!((a.db - b.db).abs() < 1e-9),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }

    #[test]
    fn misalignment_respects_the_floor(h in signal(16)) {
        if let Some(m) = misalignment(&h, &h) {
            prop_assert_eq!(m.db, MISALIGNMENT_FLOOR_DB);
        }
    }
}
