//! Browser bindings for the demo page in `www/`.
//!
//! Everything crosses the boundary as numbers, strings and flat arrays so the
//! same functions run natively in tests.

use wasm_bindgen::prelude::*;

use rcas_core::da::Scenario;
use rcas_core::field::{add_convolved_noise, generate_synthetic_wake, Grid, NoiseModel, SnapshotSet, SyntheticWakeSpec};
use rcas_core::harness::{run_twin_experiment, DataSource, ExperimentConfig, ObservationMode};
use rcas_core::pod::{compute_pod, PodBasis};

const NX: usize = 48;
const NY: usize = 24;

fn demo_grid() -> Grid {
    Grid::new(NX, NY, 8.0 / NX as f64, 4.0 / NY as f64, 0.1).expect("fixed demo grid is valid")
}

fn demo_spec(nt: usize, seed: u64) -> SyntheticWakeSpec {
    SyntheticWakeSpec {
        grid: demo_grid(),
        nt,
        seed,
        ..Default::default()
    }
}

/// Truth, noisy copy and the POD basis of the noisy snapshots.
#[wasm_bindgen]
pub struct WakeDemo {
    truth: SnapshotSet,
    noisy: SnapshotSet,
    basis: PodBasis,
}

#[wasm_bindgen]
impl WakeDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, eps_std: f64, n_modes: usize) -> Result<WakeDemo, String> {
        let truth = generate_synthetic_wake(&demo_spec(250, seed as u64)).map_err(|e| e.to_string())?;
        let noise = NoiseModel {
            eps_std,
            seed: seed as u64 + 1,
            ..Default::default()
        };
        let noisy = add_convolved_noise(&truth, &noise).map_err(|e| e.to_string())?;
        let basis = compute_pod(&noisy, n_modes).map_err(|e| e.to_string())?;
        Ok(WakeDemo { truth, noisy, basis })
    }

    pub fn nx(&self) -> usize {
        NX
    }

    pub fn ny(&self) -> usize {
        NY
    }

    pub fn nt(&self) -> usize {
        self.truth.nt()
    }

    pub fn energy_fraction(&self) -> f64 {
        self.basis.energy_fraction
    }

    /// Streamwise velocity of snapshot `k`; `which` is `truth`, `noisy` or
    /// `pod` (noisy snapshot projected and reconstructed).
    pub fn field(&self, which: &str, k: usize) -> Result<Vec<f64>, String> {
        if k >= self.nt() {
            return Err(format!("snapshot {k} out of range 0..{}", self.nt()));
        }
        let npts = NX * NY;
        let stacked = match which {
            "truth" => self.truth.stacked(k),
            "noisy" => self.noisy.stacked(k),
            "pod" => {
                let phi = self.basis.project(&self.noisy.stacked(k)).map_err(|e| e.to_string())?;
                self.basis.reconstruct(&phi)
            }
            other => return Err(format!("unknown field {other:?}")),
        };
        Ok(stacked.rows(0, npts).iter().copied().collect())
    }

    /// Field MSE of the noisy and POD-reconstructed snapshot against truth.
    pub fn errors(&self, k: usize) -> Result<Vec<f64>, String> {
        let truth = self.truth.stacked(k);
        let noisy = self.noisy.stacked(k);
        let phi = self.basis.project(&noisy).map_err(|e| e.to_string())?;
        let rec = self.basis.reconstruct(&phi);
        let n = truth.len() as f64;
        Ok(vec![(&noisy - &truth).norm_squared() / n, (&rec - &truth).norm_squared() / n])
    }

    /// Grid indices of the first `n` QR-pivot sensors.
    pub fn sensors(&self, n: usize) -> Result<Vec<u32>, String> {
        let set = self.basis.select_sensors(n).map_err(|e| e.to_string())?;
        Ok(set.indices.iter().map(|&i| i as u32).collect())
    }
}

/// MSE curves of one twin experiment.
#[wasm_bindgen]
pub struct TwinCurves {
    mse_mean: Vec<f64>,
    baseline: Vec<f64>,
    spread: Vec<f64>,
    analysis_times: Vec<u32>,
    phi1: Vec<f64>,
}

#[wasm_bindgen]
impl TwinCurves {
    pub fn mse_mean(&self) -> Vec<f64> {
        self.mse_mean.clone()
    }

    pub fn baseline(&self) -> Vec<f64> {
        self.baseline.clone()
    }

    pub fn spread(&self) -> Vec<f64> {
        self.spread.clone()
    }

    pub fn analysis_times(&self) -> Vec<u32> {
        self.analysis_times.clone()
    }

    /// Flattened `[min, mean, max, truth]` per step.
    pub fn phi1(&self) -> Vec<f64> {
        self.phi1.clone()
    }
}

/// Twin experiment on the demo grid. `n_sensors = 0` observes the full field.
#[wasm_bindgen]
pub fn run_twin(
    scenario: &str,
    m: usize,
    delta: usize,
    n_sensors: usize,
    partial: bool,
    horizon: usize,
    seed: u32,
) -> Result<TwinCurves, String> {
    let scenario = Scenario::parse(scenario).ok_or_else(|| format!("unknown scenario {scenario:?}"))?;
    let mut cfg = ExperimentConfig {
        scenario,
        m,
        delta,
        horizon,
        observation: if n_sensors == 0 {
            ObservationMode::FullField
        } else {
            ObservationMode::Sensors(n_sensors)
        },
        data: DataSource::Synthetic(demo_spec(250, 0)),
        ..Default::default()
    }
    .with_seed(seed as u64);
    if partial {
        cfg = cfg.partially_trained();
    }
    let res = run_twin_experiment(&cfg).map_err(|e| e.to_string())?;
    Ok(TwinCurves {
        mse_mean: res.mse_mean,
        baseline: res.noisy_baseline,
        spread: res.spread_phi,
        analysis_times: res.analysis_times.iter().map(|&t| t as u32).collect(),
        phi1: res.phi1.iter().flatten().copied().collect(),
    })
}
