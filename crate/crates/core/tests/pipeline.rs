use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rcas_core::esn::{build_reservoir, grid_search_hyperparams, validation_score, EsnConfig, EsnError, ValidationSplit};
use rcas_core::field::{add_convolved_noise, generate_synthetic_wake, NoiseModel, SyntheticWakeSpec};
use rcas_core::harness::{mse, prepare, run_twin_experiment, sweep, DataSource, ExperimentConfig, HarnessError};

fn white_series(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng))
}

#[test]
fn noisy_baseline_matches_noise_variance() {
    let spec = SyntheticWakeSpec {
        nt: 40,
        ..Default::default()
    };
    let truth = generate_synthetic_wake(&spec).unwrap();
    let noise = NoiseModel::default();
    let noisy = add_convolved_noise(&truth, &noise).unwrap();
    let kernel = noise.kernel();
    let attenuation: f64 = kernel.iter().map(|k| k * k).sum::<f64>();
    let mean: f64 = (0..truth.nt()).map(|k| mse(&noisy.stacked(k), &truth.stacked(k)).unwrap()).sum::<f64>() / 40.0;
    let expected = noise.eps_std * noise.eps_std * attenuation;
    assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
}

#[test]
fn default_hyperparameters_are_competitive_on_the_wake() {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg).unwrap();
    let series = &prepared.basis.temporal_coeffs;
    let reservoir = build_reservoir(&cfg.esn, 4).unwrap();
    let split = ValidationSplit {
        train_len: 200,
        valid_len: 50,
    };
    let mut sigmas = rcas_core::esn::log_grid(0.5, 50.0, 8);
    let mut rhos = rcas_core::esn::linear_grid(0.2, 1.05, 8);
    sigmas.push(0.890);
    rhos.push(0.976);
    let best = grid_search_hyperparams(&reservoir, series, &split, &sigmas, &rhos).unwrap();
    let stated = validation_score(&reservoir, series, &split, 0.890, 0.976).unwrap().unwrap();
    assert!(best.spectral_radius < 1.05);
    assert!(best.validation_mse <= stated);
    assert!(stated <= 2.0 * best.validation_mse, "{stated} vs {}", best.validation_mse);
}

#[test]
fn diverging_candidate_is_never_selected() {
    let series = white_series(100, 1);
    let reservoir = build_reservoir(
        &EsnConfig {
            washout: 20,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let split = ValidationSplit {
        train_len: 60,
        valid_len: 40,
    };
    let best = grid_search_hyperparams(&reservoir, &series, &split, &[0.1], &[0.5, 0.976, 1.05]).unwrap();
    let diverged: Vec<f64> = best.scores.iter().filter(|s| s.2.is_none()).map(|s| s.1).collect();
    assert_eq!(diverged, vec![1.05]);
    assert_ne!(best.spectral_radius, 1.05);
}

#[test]
fn all_diverging_grid_is_an_error() {
    let series = white_series(100, 1);
    let reservoir = build_reservoir(
        &EsnConfig {
            washout: 20,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let split = ValidationSplit {
        train_len: 60,
        valid_len: 40,
    };
    match grid_search_hyperparams(&reservoir, &series, &split, &[0.89], &[0.976, 1.05]) {
        Err(EsnError::AllCandidatesDiverged { grid }) => assert!(grid.contains("0.976")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn partial_training_forecasts_worse() {
    let full = ExperimentConfig {
        delta: 10_000,
        background_lag: 0,
        ..Default::default()
    };
    let partial = full.clone().partially_trained();
    assert_eq!(partial.n_train, 88);
    let a = run_twin_experiment(&full).unwrap();
    let b = run_twin_experiment(&partial).unwrap();
    assert!(b.final_mse() > a.final_mse(), "{} vs {}", b.final_mse(), a.final_mse());
}

#[test]
fn pure_forecast_has_no_analyses() {
    let cfg = ExperimentConfig {
        delta: 400,
        ..Default::default()
    };
    let res = run_twin_experiment(&cfg).unwrap();
    assert!(res.analysis_times.is_empty());
    assert_eq!(res.mse_mean.len(), cfg.horizon);
    assert_eq!(res.noisy_baseline.len(), cfg.horizon);
}

#[test]
fn provided_data_is_used_verbatim() {
    let spec = SyntheticWakeSpec {
        nt: 300,
        seed: 5,
        ..Default::default()
    };
    let data = Arc::new(generate_synthetic_wake(&spec).unwrap());
    let provided = ExperimentConfig {
        data: DataSource::Provided(data),
        horizon: 50,
        ..Default::default()
    }
    .with_seed(5);
    let synthetic = ExperimentConfig {
        data: DataSource::Synthetic(spec),
        horizon: 50,
        ..Default::default()
    }
    .with_seed(5);
    assert_eq!(run_twin_experiment(&provided).unwrap(), run_twin_experiment(&synthetic).unwrap());

    let too_short = ExperimentConfig {
        horizon: 100,
        ..provided
    };
    match run_twin_experiment(&too_short) {
        Err(HarnessError::Stage { stage, .. }) => assert_eq!(stage, "data"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sweep_of_one_matches_single_run() {
    let cfg = ExperimentConfig {
        horizon: 40,
        ..Default::default()
    };
    let (results, rows) = sweep(std::slice::from_ref(&cfg)).unwrap();
    let single = run_twin_experiment(&cfg).unwrap();
    assert_eq!(results[0].as_ref().unwrap(), &single);
    assert_eq!(rows[0].final_mse, Some(single.final_mse()));
}
