//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rcas_core::container::Container;
use rcas_core::da::{srkf_update, Scenario};
use rcas_core::esn::{ridge_solve, OutputFactorization};
use rcas_core::field::{generate_synthetic_wake, SyntheticWakeSpec};
use rcas_core::harness::{prepare, run_twin_experiment, ExperimentConfig, ObservationMode, RunResult};
use rcas_core::pod::compute_pod;

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    out.detail = format!("{} [{:.2}s", out.detail, elapsed.as_secs_f64());
    if let Some(limit) = limit {
        out.detail += &format!(" / limit {:.0}s", limit.as_secs_f64());
        if elapsed > limit {
            out.pass = false;
            out.detail += ", too slow";
        }
    }
    out.detail += "]";
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pod_energy() -> Outcome {
    let truth = generate_synthetic_wake(&SyntheticWakeSpec::default()).unwrap();
    let basis = compute_pod(&truth, 4).unwrap();
    Outcome {
        pass: basis.energy_fraction >= 0.98,
        detail: format!("energy_fraction {:.6} (need >= 0.98)", basis.energy_fraction),
    }
}

fn filter_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst_cov = 0.0f64;
    let mut rel_sq = 0.0;
    for _ in 0..20 {
        let n_state = rng.random_range(1..=8usize);
        let p = rng.random_range(1..=4usize);
        let n = n_state + p;
        let m = rng.random_range(3..=12usize);
        let members = DMatrix::from_fn(n, m, |_, _| normal(&mut rng));
        let c_dd = DVector::from_fn(p, |_, _| rng.random_range(0.1..2.0));
        let d = DVector::from_fn(p, |_, _| normal(&mut rng));
        let post = srkf_update(&members, n_state..n, &d, &c_dd).unwrap();
        let cf = anomaly_product(&members);
        let ca = anomaly_product(&post);
        let gain = kalman_gain(&cf, n_state, &c_dd);
        let mut i_km = DMatrix::identity(n, n);
        let mut block = i_km.view_mut((0, n_state), (n, p));
        block -= &gain;
        worst_cov = worst_cov.max((ca - i_km * cf).amax());

        // sampled prior against the exact Gaussian update
        let mu = DVector::from_fn(n, |_, _| rng.random_range(1.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let l = DMatrix::from_fn(n, n, |i, j| if i >= j { rng.random_range(-0.5..0.5) } else { 0.0 });
        let cov = &l * l.transpose() + DMatrix::identity(n, n) * 0.05;
        let chol = cov.clone().cholesky().unwrap();
        let big = DMatrix::from_fn(n, 200, |_, _| normal(&mut rng));
        // perturbations centred on the known background mean
        let mut sampled = chol.l() * big;
        let offset = &mu - sampled.column_mean();
        for mut col in sampled.column_iter_mut() {
            col += &offset;
        }
        let d = &mu.rows(n_state, p) + DVector::from_fn(p, |i, _| normal(&mut rng) * c_dd[i].sqrt());
        let post = srkf_update(&sampled, n_state..n, &d, &c_dd).unwrap();
        let post_mean = post.column_mean();
        let gain = kalman_gain(&cov, n_state, &c_dd);
        let exact = &mu + gain * (&d - mu.rows(n_state, p));
        rel_sq += ((post_mean - &exact).norm() / exact.norm()).powi(2);
    }
    let rms = (rel_sq / 20.0).sqrt();
    Outcome {
        pass: worst_cov < 1e-8 && rms < 0.02,
        detail: format!("max |A^a A^aT - (I-KM)C^f| {worst_cov:.2e} (need < 1e-8); m=200 mean RMS rel. error {:.3}% (need < 2%)", 100.0 * rms),
    }
}

fn anomaly_product(members: &DMatrix<f64>) -> DMatrix<f64> {
    let m = members.ncols();
    let mean = members.column_mean();
    let mut a = members.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
    }
    &a * a.transpose() / (m - 1) as f64
}

/// `C Mᵀ (M C Mᵀ + C_dd)⁻¹` for `M` selecting the rows from `obs_start` on.
fn kalman_gain(cov: &DMatrix<f64>, obs_start: usize, c_dd: &DVector<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let p = n - obs_start;
    let cmt = cov.columns(obs_start, p).into_owned();
    let s = cov.view((obs_start, obs_start), (p, p)) + DMatrix::from_diagonal(c_dd);
    cmt * s.try_inverse().unwrap()
}

fn ridge_optimality() -> Outcome {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg).unwrap();
    let (design, targets) = prepared.model.training_design(&prepared.basis.temporal_coeffs).unwrap();
    let lambda = cfg.esn.tikhonov;
    let w = ridge_solve(&design, &targets, lambda).unwrap();
    let loss = |w: &DMatrix<f64>| (w * &design - &targets).norm_squared() + lambda * w.norm_squared();
    let scale = loss(&w);
    let mut worst = 0.0f64;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let h = 1e-6 * w[(i, j)].abs().max(1e-3);
            let mut plus = w.clone();
            plus[(i, j)] += h;
            let mut minus = w.clone();
            minus[(i, j)] -= h;
            worst = worst.max(((loss(&plus) - loss(&minus)) / (2.0 * h)).abs());
        }
    }
    let grad_rel = worst / scale;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = DMatrix::from_fn(12, 60, |_, _| normal(&mut rng));
    let y = DMatrix::from_fn(3, 60, |_, _| normal(&mut rng));
    let ridge = ridge_solve(&x, &y, 0.0).unwrap();
    let oracle = x.transpose().svd(true, true).solve(&y.transpose(), 1e-14).unwrap().transpose();
    let ls_err = (ridge - oracle).amax();
    Outcome {
        pass: grad_rel < 1e-4 && ls_err < 1e-8,
        detail: format!("max |dL/dW| / L {grad_rel:.2e} (need < 1e-4); lambda=0 vs SVD least squares {ls_err:.2e} (need < 1e-8)"),
    }
}

fn echo_contraction() -> Outcome {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg).unwrap();
    let model = &prepared.model;
    assert_eq!(model.config.spectral_radius, 0.976);
    let forcing = &prepared.basis.temporal_coeffs;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut a = DVector::from_fn(model.n_reservoir(), |_, _| rng.random_range(-1.0..1.0));
    let mut b = DVector::from_fn(model.n_reservoir(), |_, _| rng.random_range(-1.0..1.0));
    let mut logs = Vec::new();
    for k in 0..200 {
        let input = forcing.row(k % forcing.nrows()).transpose();
        a = model.advance(&a, &input);
        b = model.advance(&b, &input);
        let dist = (&a - &b).norm();
        if dist > 1e-14 {
            logs.push(((k + 1) as f64, dist.ln()));
        }
    }
    let slope = if logs.len() >= 2 { fit_slope(&logs) } else { f64::NEG_INFINITY };
    let gamma = slope.exp();
    Outcome {
        pass: gamma < 1.0,
        detail: format!("fitted gamma {gamma:.4} over {} resolved steps (need < 1)", logs.len()),
    }
}

fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn reservoir_vs_physical() -> Outcome {
    let run = |scenario| {
        run_twin_experiment(&ExperimentConfig {
            scenario,
            m: 10,
            delta: 25,
            observation: ObservationMode::Sensors(1),
            ..Default::default()
        })
        .unwrap()
    };
    let physical = run(Scenario::PhysicalOnly);
    let twofold = run(Scenario::TwoFold);
    let n = twofold.horizon() - 1;
    let mse_ok = twofold.mse_mean[n] < physical.mse_mean[n];
    let spread_ok = twofold.spread_phi[n] < physical.spread_phi[n];
    Outcome {
        pass: mse_ok && spread_ok,
        detail: format!(
            "final MSE twofold {:.3e} vs physical {:.3e}; final spread {:.3e} vs {:.3e}",
            twofold.mse_mean[n], physical.mse_mean[n], twofold.spread_phi[n], physical.spread_phi[n]
        ),
    }
}

fn sensor_count() -> Outcome {
    let full = run_twin_experiment(&ExperimentConfig {
        observation: ObservationMode::FullField,
        ..Default::default()
    })
    .unwrap();
    let first = full.analysis_times[0] - 1;
    let drop_ok = full.mse_mean[first] < full.noisy_baseline[first]
        && (first == 0 || full.mse_mean[first - 1] >= full.noisy_baseline[first - 1]);

    let crosses: Vec<Option<usize>> = [1, 2, 4, 8]
        .iter()
        .map(|&n| {
            run_twin_experiment(&ExperimentConfig {
                observation: ObservationMode::Sensors(n),
                ..Default::default()
            })
            .unwrap()
            .time_to_cross()
        })
        .collect();
    let as_steps: Vec<usize> = crosses.iter().map(|c| c.unwrap_or(usize::MAX)).collect();
    let inversions = as_steps.windows(2).filter(|w| w[1] > w[0]).count();
    let all_cross = crosses.iter().all(|c| c.is_some());
    Outcome {
        pass: drop_ok && all_cross && inversions <= 1,
        detail: format!(
            "full field at first analysis {:.3e} vs baseline {:.3e} (prior step {:.3e}); time-to-cross N_d=1,2,4,8: {:?}, {inversions} inversion(s)",
            full.mse_mean[first],
            full.noisy_baseline[first],
            if first > 0 { full.mse_mean[first - 1] } else { f64::NAN },
            crosses
        ),
    }
}

fn above_from_first_analysis(r: &RunResult) -> usize {
    let start = r.analysis_times.first().map_or(0, |t| t - 1);
    (start..r.horizon()).filter(|&i| r.mse_mean[i] >= r.noisy_baseline[i]).count()
}

fn online_learning() -> Outcome {
    let mut three_ok = true;
    let mut two_fails = false;
    let mut parts = Vec::new();
    for delta in [10, 20, 30] {
        let cfg = |scenario| {
            ExperimentConfig {
                scenario,
                m: 50,
                delta,
                observation: ObservationMode::FullField,
                ..Default::default()
            }
            .partially_trained()
        };
        let three = run_twin_experiment(&cfg(Scenario::ThreeFold)).unwrap();
        let two = run_twin_experiment(&cfg(Scenario::TwoFold)).unwrap();
        let a3 = above_from_first_analysis(&three);
        let a2 = above_from_first_analysis(&two);
        three_ok &= a3 == 0;
        two_fails |= a2 > 0 || two.collapsed();
        parts.push(format!(
            "delta={delta}: threefold {a3} steps above baseline (final {:.2e}), twofold {a2} above (final {:.2e}, collapsed {})",
            three.final_mse(),
            two.final_mse(),
            two.collapsed()
        ));
    }
    Outcome {
        pass: three_ok && two_fails,
        detail: format!("n_train {}; {}", ExperimentConfig::default().partially_trained().n_train, parts.join("; ")),
    }
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig {
        scenario: Scenario::ThreeFold,
        horizon: 100,
        record_log: true,
        ..Default::default()
    };
    let a = run_twin_experiment(&cfg).unwrap();
    let b = run_twin_experiment(&cfg).unwrap();
    let same = a.summary_csv().as_bytes() == b.summary_csv().as_bytes() && a.log_csv() == b.log_csv();
    Outcome {
        pass: same,
        detail: format!("summary CSV {} bytes, identical: {same}", a.summary_csv().len()),
    }
}

fn round_trips() -> Outcome {
    let cfg = ExperimentConfig::default();
    let prepared = prepare(&cfg).unwrap();
    let container = Container {
        snapshots: prepared.noisy.clone(),
        pod: Some(prepared.basis.clone()),
        esn: Some(prepared.model.clone()),
    };
    let bytes = container.to_bytes();
    let back = Container::from_bytes(&bytes).unwrap();
    let bits_equal = back.to_bytes() == bytes
        && bit_equal(&back.snapshots.ux, &container.snapshots.ux)
        && bit_equal(&back.snapshots.uy, &container.snapshots.uy)
        && bit_equal(&back.pod.as_ref().unwrap().modes, &prepared.basis.modes)
        && bit_equal(&back.esn.as_ref().unwrap().w_out, &prepared.model.w_out)
        && back == container;
    let w_out = &prepared.model.w_out;
    let err = (OutputFactorization::new(w_out).recompose() - w_out).amax();
    Outcome {
        pass: bits_equal && err < 1e-10,
        detail: format!("container of {} bytes bit-exact: {bits_equal}; factorize/recompose {err:.2e} (need < 1e-10)", bytes.len()),
    }
}

fn bit_equal(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Option<u64>, fn() -> Outcome)> = vec![
        ("1 POD energy", Some(5), pod_energy),
        ("2 filter oracle", Some(10), filter_oracle),
        ("3 ridge optimality", Some(10), ridge_optimality),
        ("4 echo contraction", Some(5), echo_contraction),
        ("5 reservoir update beats physical-only", Some(60), reservoir_vs_physical),
        ("6 observation density", Some(180), sensor_count),
        ("7 online parameter learning", Some(300), online_learning),
        ("8 determinism", None, determinism),
        ("9 round trips", None, round_trips),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let out = timed(limit.map(Duration::from_secs), check);
        println!("criterion {name}: {} - {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
        if !out.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
