use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use rcas_core::container::Container;
use rcas_core::da::{ensemble_stats, srkf_update, Scenario};
use rcas_core::esn::{ridge_solve, OutputFactorization};
use rcas_core::field::{Grid, NoiseModel, SnapshotSet};
use rcas_core::harness::{mse, ExperimentConfig, ObservationMode};
use rcas_core::pod::compute_pod;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn snapshots(nx: usize, ny: usize, nt: usize) -> impl Strategy<Value = SnapshotSet> {
    let npts = nx * ny;
    (matrix(nt, npts), matrix(nt, npts)).prop_map(move |(ux, uy)| {
        let grid = Grid::new(nx, ny, 0.5, 0.25, 0.1).unwrap();
        SnapshotSet::uniform(grid, ux, uy, 0.0).unwrap()
    })
}

fn ensemble() -> impl Strategy<Value = (DMatrix<f64>, usize, DVector<f64>, DVector<f64>)> {
    (1usize..6, 1usize..4, 3usize..10).prop_flat_map(|(n_state, p, m)| {
        (
            matrix(n_state + p, m),
            Just(n_state),
            prop::collection::vec(-2.0f64..2.0, p).prop_map(DVector::from_vec),
            prop::collection::vec(0.05f64..2.0, p).prop_map(DVector::from_vec),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pod_modes_are_orthonormal_and_energy_is_monotone(data in snapshots(4, 3, 9), n in 1usize..5) {
        let basis = compute_pod(&data, n).unwrap();
        let gram = basis.modes.tr_mul(&basis.modes);
        prop_assert!((gram - DMatrix::identity(n, n)).amax() < 1e-10);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&basis.energy_fraction));
        let more = compute_pod(&data, n + 1).unwrap();
        prop_assert!(more.energy_fraction + 1e-12 >= basis.energy_fraction);
    }

    #[test]
    fn in_span_fields_survive_projection(data in snapshots(4, 3, 9), phi in prop::collection::vec(-1.0f64..1.0, 3)) {
        let basis = compute_pod(&data, 3).unwrap();
        let phi = DVector::from_vec(phi);
        let field = basis.reconstruct(&phi);
        let back = basis.project(&field).unwrap();
        prop_assert!((back - phi).amax() < 1e-8);
    }

    #[test]
    fn srkf_reduces_spread_and_keeps_anomalies_centred((members, n_state, d, c_dd) in ensemble()) {
        let n = members.nrows();
        let post = srkf_update(&members, n_state..n, &d, &c_dd).unwrap();
        let prior = ensemble_stats(&members).unwrap();
        let after = ensemble_stats(&post).unwrap();
        let prior_cov = &prior.anomalies * prior.anomalies.transpose();
        let post_cov = &after.anomalies * after.anomalies.transpose();
        for i in 0..n {
            prop_assert!(post_cov[(i, i)] <= prior_cov[(i, i)] + 1e-10);
        }
        let row_sums = after.anomalies.column_sum();
        prop_assert!(row_sums.amax() < 1e-10);
    }

    #[test]
    fn ridge_gradient_vanishes(x in matrix(5, 12), y in matrix(2, 12), lambda in 1e-4f64..1.0) {
        let w = ridge_solve(&x, &y, lambda).unwrap();
        let grad = (&w * &x - &y) * x.transpose() + &w * lambda;
        prop_assert!(grad.amax() < 1e-9);
    }

    #[test]
    fn factorization_recomposes(w in matrix(4, 9)) {
        let f = OutputFactorization::new(&w);
        prop_assert!((f.recompose() - &w).amax() < 1e-10);
        prop_assert!(f.alpha.iter().all(|a| *a >= 0.0));
        prop_assert!(f.alpha.as_slice().windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn containers_round_trip_bit_exactly(data in snapshots(3, 2, 5)) {
        let c = Container::from_snapshots(data);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn mse_is_symmetric_and_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 10), b in prop::collection::vec(-5.0f64..5.0, 10)) {
        let (a, b) = (DVector::from_vec(a), DVector::from_vec(b));
        let ab = mse(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mse(&b, &a).unwrap());
    }

    #[test]
    fn noise_kernel_is_normalized(ks in 0.0f64..3.0) {
        let kernel = NoiseModel { eps_std: 0.1, kernel_std: ks, seed: 0 }.kernel();
        prop_assert!((kernel.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_text_round_trips(m in 2usize..60, delta in 1usize..40, sensors in prop::option::of(1usize..9), seed in any::<u64>(), which in 0usize..3) {
        let scenario = [Scenario::PhysicalOnly, Scenario::TwoFold, Scenario::ThreeFold][which];
        let cfg = ExperimentConfig {
            scenario,
            m,
            delta,
            observation: sensors.map_or(ObservationMode::FullField, ObservationMode::Sensors),
            ..Default::default()
        }
        .with_seed(seed);
        let mut back = ExperimentConfig::default();
        for (k, v) in rcas_core::harness::parse_key_values(&cfg.to_key_value_text()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        prop_assert_eq!(back, cfg);
    }
}
