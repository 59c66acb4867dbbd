use ksave::edr::subspace_distance;
use ksave::experiments::{fit_rate, ExperimentRow};
use ksave::kernels::build_order_k_kernel;
use ksave::save_core::{save_matrices, BandwidthSchedule};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn sample(n: usize, d: usize) -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>)> {
    (prop::collection::vec(-2.0f64..2.0, n * d), prop::collection::vec(-1.0f64..1.0, n))
        .prop_map(move |(zs, y)| (DMatrix::from_row_slice(n, d, &zs), y))
}

fn frame(d: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, d * m)
        .prop_map(move |v| DMatrix::from_column_slice(d, m, &v))
        .prop_filter("full column rank", move |a| a.clone().svd(false, false).singular_values.min() > 1e-3)
}

fn row(n_hat: usize, seed: u64, err: f64) -> ExperimentRow {
    ExperimentRow {
        dims: format!("{n_hat}"),
        n_hat,
        seed,
        c1: 0.35,
        c2: 0.05,
        k: 3,
        b_n: 0.1,
        e_n: 0.5,
        gamma_err_fro: Some(err),
        subspace_dist: None,
        beta_err: None,
        sup_f: None,
        sup_m: None,
        sup_big_m: None,
        lambdas: Vec::new(),
        runtime_ms: None,
        status: "ok".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identities_and_psd((z, y) in sample(40, 3)) {
        let kernel = build_order_k_kernel(3, 3.0).unwrap();
        let s = BandwidthSchedule::default();
        let m = save_matrices(&z, &y, &kernel, &s).unwrap();
        let lhs = &m.gamma_hat;
        let rhs = -DMatrix::<f64>::identity(3, 3) + &m.psi_hat * 2.0 + &m.lambda_hat;
        prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + m.lambda_hat.amax()));
        prop_assert_eq!(m.lambda_hat.clone(), m.lambda_hat.transpose());
        let min = m.lambda_hat.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-10 * m.lambda_hat.amax().max(1.0));
    }

    #[test]
    fn permutation_invariance((z, y) in sample(30, 2), rot in 1usize..29) {
        let kernel = build_order_k_kernel(2, 1.0).unwrap();
        let s = BandwidthSchedule { k: 2, ..BandwidthSchedule::default() };
        let a = save_matrices(&z, &y, &kernel, &s).unwrap();
        let perm: Vec<usize> = (0..30).map(|i| (i + rot) % 30).collect();
        let zp = DMatrix::from_fn(30, 2, |i, j| z[(perm[i], j)]);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let b = save_matrices(&zp, &yp, &kernel, &s).unwrap();
        let scale = 1.0 + a.gamma_hat.amax();
        prop_assert!((a.gamma_hat - b.gamma_hat).amax() <= 1e-12 * scale);
    }

    #[test]
    fn subspace_distance_is_a_bounded_metric(a in frame(4, 2), b in frame(4, 2), c in frame(4, 2)) {
        let ab = subspace_distance(&a, &b).unwrap();
        let bc = subspace_distance(&b, &c).unwrap();
        let ac = subspace_distance(&a, &c).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - subspace_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert!(subspace_distance(&a, &a).unwrap() < 1e-7);
    }

    #[test]
    fn rate_slope_is_recovered_and_scale_free(slope in -1.0f64..-0.1, scale in 0.01f64..100.0) {
        let mut rows = Vec::new();
        for (i, n) in [256usize, 1024, 4096, 16384].into_iter().enumerate() {
            for seed in 0..5u64 {
                let jitter = 1.0 + 0.01 * (seed as f64 - 2.0);
                rows.push(row(n, seed + 10 * i as u64, scale * (n as f64).powf(slope) * jitter));
            }
        }
        let fit = fit_rate(&rows, "gamma_err_fro").unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-10);
        rows.reverse();
        prop_assert!((fit_rate(&rows, "gamma_err_fro").unwrap().slope - fit.slope).abs() < 1e-12);
    }
}
