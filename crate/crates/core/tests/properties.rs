mod common;

use common::*;
use proptest::prelude::*;
use senscal::selection::{compute_path, compute_path_with};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn projected_kernel_is_psd(seed in any::<u64>()) {
        let (lo, hi) = projected_kernel_spectrum(seed);
        prop_assert!(lo >= -1e-8 * hi.abs().max(1.0), "min eigenvalue {lo}, max {hi}");
    }

    #[test]
    fn kkt_holds_at_convergence(seed in any::<u64>(), m in 1usize..6, frac in 0.0..1.0f64) {
        let v = kkt_case(seed, m, frac).map_err(TestCaseError::fail)?;
        prop_assert!(v <= 1e-6, "kkt residual {v}");
    }

    #[test]
    fn zero_penalty_is_gls(seed in any::<u64>(), m in 1usize..5) {
        let diff = gls_case(seed, m);
        prop_assume!(diff.is_some());
        prop_assert!(diff.unwrap() <= 1e-8, "difference {:?}", diff);
    }

    #[test]
    fn huge_penalty_returns_theta0(seed in any::<u64>(), m in 1usize..6) {
        prop_assert!(huge_penalty_case(seed, m));
    }

    #[test]
    fn warm_and_cold_paths_agree(seed in any::<u64>(), m in 1usize..5) {
        let p = random_case(seed, 15, m, 2, 2.0).problem();
        let warm = compute_path_with(&p, None, true).unwrap();
        let cold = compute_path_with(&p, None, false).unwrap();
        prop_assert_eq!(warm.selected_index, cold.selected_index);
        for (a, b) in warm.entries.iter().zip(&cold.entries) {
            for i in 0..m {
                prop_assert!((a.theta_hat[i] - b.theta_hat[i]).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn output_weight_scaling(seed in any::<u64>(), m in 1usize..4, c in 0.01..100.0f64) {
        let case = random_case(seed, 15, m, 2, 2.0);
        let base = case.problem().with_output_weights(vec![1.0, 0.5]).unwrap();
        let scaled = case.problem().with_output_weights(vec![c, 0.5 * c]).unwrap();
        let a = compute_path(&base, None).unwrap();
        let b = compute_path(&scaled, None).unwrap();
        prop_assert_eq!(a.selected_index, b.selected_index);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            prop_assert!((y.lambda - c * x.lambda).abs() <= 1e-9 * y.lambda.max(1e-300));
            prop_assert_eq!(&x.support, &y.support);
            prop_assert!((y.empirical_loss - c * x.empirical_loss).abs() <= 1e-8 * y.empirical_loss.max(1e-12));
            for i in 0..m {
                prop_assert!((x.theta_hat[i] - y.theta_hat[i]).abs() <= 1e-7);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn projection_annihilates_gradient(seed in any::<u64>(), two_d in any::<bool>(), m in 1usize..3, phi in 0.5..6.0f64) {
        let d = if two_d { 2 } else { 1 };
        let r = annihilation_residual(seed, d, m, phi);
        prop_assert!(r <= 1e-3, "residual {r}");
    }

    #[test]
    fn agrees_with_lattice_search(seed in any::<u64>(), m in 1usize..=3, frac in 0.0..1.0f64) {
        lattice_case(seed, m, frac).map_err(TestCaseError::fail)?;
    }
}
