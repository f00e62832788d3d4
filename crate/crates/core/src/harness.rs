//! Twin experiments: noisy data from a known truth, POD-ESN trained on the
//! noisy training window, then alternating ensemble forecasts and analyses.
//! The truth is only read to score the reconstruction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::container::Container;
use crate::da::{init_ensemble, AugmentedEnsemble, MeasurementOperator, Observation, Scenario, Spreads};
use crate::esn::{build_reservoir, default_search_grid, grid_search_hyperparams, EsnConfig, EsnModel, ValidationSplit};
use crate::field::{add_convolved_noise, generate_synthetic_wake, Grid, NoiseModel, SnapshotSet, SyntheticWakeSpec};
use crate::pod::{compute_pod, PodBasis, SensorProbe, SensorSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("invalid {key}: {message}")]
    Config { key: String, message: String },
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn config_err(key: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// `1/(2 N_x N_y) (‖ux* − ux‖² + ‖uy* − uy‖²)` on stacked field vectors.
pub fn mse(pred: &DVector<f64>, truth: &DVector<f64>) -> Result<f64, HarnessError> {
    if pred.len() != truth.len() {
        return Err(HarnessError::ShapeMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok((pred - truth).norm_squared() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationMode {
    /// Whole noisy field projected onto the POD modes.
    FullField,
    /// Both velocity components at the first `n` QR-pivot sensors.
    Sensors(usize),
}

impl ObservationMode {
    pub fn label(&self) -> String {
        match self {
            ObservationMode::FullField => "full".into(),
            ObservationMode::Sensors(n) => format!("sensors{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticWakeSpec),
    /// Externally supplied truth, at least `n_train + horizon` snapshots.
    Provided(Arc<SnapshotSet>),
}

/// Initial ensemble spreads. `phi_rel` is relative to the RMS training
/// coefficient, `alpha_rel` to the trained singular values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeSpreads {
    pub phi_rel: f64,
    pub r: f64,
    pub alpha_rel: f64,
}

impl Default for RelativeSpreads {
    fn default() -> Self {
        Self {
            phi_rel: 0.5,
            r: 0.1,
            alpha_rel: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub m: usize,
    pub delta: usize,
    pub observation: ObservationMode,
    pub n_train: usize,
    pub horizon: usize,
    pub n_modes: usize,
    pub data: DataSource,
    pub noise: NoiseModel,
    pub esn: EsnConfig,
    pub spreads: RelativeSpreads,
    /// The ensemble is warmed up on coefficients ending this many steps
    /// before the start time, so the prior carries a phase error.
    pub background_lag: usize,
    /// Multiplicative anomaly inflation applied before each analysis; 1 is off.
    pub inflation: f64,
    pub ensemble_seed: u64,
    pub grid_search: bool,
    pub record_log: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::TwoFold,
            m: 10,
            delta: 25,
            observation: ObservationMode::Sensors(1),
            n_train: 250,
            horizon: 250,
            n_modes: 4,
            data: DataSource::Synthetic(SyntheticWakeSpec::default()),
            noise: NoiseModel::default(),
            esn: EsnConfig {
                seed: 2,
                ..Default::default()
            },
            spreads: RelativeSpreads::default(),
            background_lag: 10,
            inflation: 1.0,
            ensemble_seed: 3,
            grid_search: false,
            record_log: false,
        }
    }
}

impl ExperimentConfig {
    /// Training window covering 2.1 periods of the leading harmonic.
    pub fn partially_trained(mut self) -> Self {
        if let DataSource::Synthetic(spec) = &self.data {
            self.n_train = (2.1 * spec.base_period).round() as usize;
        }
        self
    }

    /// Spread one seed over every stage. The default configuration is
    /// `with_seed(0)`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
        self.noise.seed = seed.wrapping_add(1);
        self.esn.seed = seed.wrapping_add(2);
        self.ensemble_seed = seed.wrapping_add(3);
        self
    }

    pub fn label(&self) -> String {
        format!(
            "{}_m{}_d{}_{}_nt{}",
            self.scenario.name(),
            self.m,
            self.delta,
            self.observation.label(),
            self.n_train
        )
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.m < 2 {
            return Err(config_err("m", "ensemble needs at least 2 members"));
        }
        if self.delta < 1 {
            return Err(config_err("delta", "must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(config_err("horizon", "must be at least 1"));
        }
        if let ObservationMode::Sensors(0) = self.observation {
            return Err(config_err("n_sensors", "must be at least 1"));
        }
        if self.n_train < 2 {
            return Err(config_err("n_train", "must be at least 2"));
        }
        if self.background_lag + 1 >= self.n_train {
            return Err(config_err("background_lag", "must leave at least two training steps"));
        }
        if !(self.inflation >= 1.0) {
            return Err(config_err("inflation", "must be >= 1"));
        }
        Ok(())
    }

    /// Human-readable `key=value` lines, one per setting.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut p: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| p.push((k.to_string(), v));
        put("scenario", self.scenario.name().into());
        put("m", self.m.to_string());
        put("delta", self.delta.to_string());
        match self.observation {
            ObservationMode::FullField => put("full_field", "true".into()),
            ObservationMode::Sensors(n) => {
                put("full_field", "false".into());
                put("n_sensors", n.to_string());
            }
        }
        put("n_train", self.n_train.to_string());
        put("horizon", self.horizon.to_string());
        put("n_modes", self.n_modes.to_string());
        match &self.data {
            DataSource::Synthetic(s) => {
                put("data", "synthetic".into());
                put("nx", s.grid.nx.to_string());
                put("ny", s.grid.ny.to_string());
                put("dx", s.grid.dx.to_string());
                put("dy", s.grid.dy.to_string());
                put("dt", s.grid.dt.to_string());
                put("n_pairs", s.n_pairs.to_string());
                put("base_period", s.base_period.to_string());
                put(
                    "amplitudes",
                    s.amplitudes.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","),
                );
                put("free_stream", s.mean_flow.free_stream.to_string());
                put("deficit", s.mean_flow.deficit.to_string());
                put("data_seed", s.seed.to_string());
            }
            DataSource::Provided(d) => {
                put("data", "provided".into());
                put("nx", d.grid.nx.to_string());
                put("ny", d.grid.ny.to_string());
            }
        }
        put("eps_std", self.noise.eps_std.to_string());
        put("kernel_std", self.noise.kernel_std.to_string());
        put("noise_seed", self.noise.seed.to_string());
        put("n_reservoir", self.esn.n_reservoir.to_string());
        put("rho", self.esn.spectral_radius.to_string());
        put("sigma_in", self.esn.input_scaling.to_string());
        put("connectivity", self.esn.connectivity.to_string());
        put("tikhonov", self.esn.tikhonov.to_string());
        put("input_bias", self.esn.input_bias.to_string());
        put("washout", self.esn.washout.to_string());
        put("esn_seed", self.esn.seed.to_string());
        put("background_lag", self.background_lag.to_string());
        put("spread_phi", self.spreads.phi_rel.to_string());
        put("spread_r", self.spreads.r.to_string());
        put("spread_alpha", self.spreads.alpha_rel.to_string());
        put("inflation", self.inflation.to_string());
        put("ensemble_seed", self.ensemble_seed.to_string());
        put("grid_search", self.grid_search.to_string());
        p
    }

    pub fn to_key_value_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Apply one `key=value` setting. Keys match [`Self::to_pairs`]; `seed`
    /// sets every stage seed at once.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
            v.trim().parse().map_err(|_| config_err(key, format!("cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool, HarnessError> {
            match v.trim() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => Err(config_err(key, format!("expected true/false, got {other:?}"))),
            }
        }
        fn synthetic<'a>(cfg: &'a mut ExperimentConfig, key: &str) -> Result<&'a mut SyntheticWakeSpec, HarnessError> {
            match &mut cfg.data {
                DataSource::Synthetic(s) => Ok(s),
                DataSource::Provided(_) => Err(config_err(key, "only applies to synthetic data")),
            }
        }
        match key {
            "scenario" => {
                self.scenario =
                    Scenario::parse(value.trim()).ok_or_else(|| config_err(key, format!("unknown scenario {value:?}")))?
            }
            "m" => self.m = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "full_field" => {
                if flag(key, value)? {
                    self.observation = ObservationMode::FullField;
                } else if self.observation == ObservationMode::FullField {
                    self.observation = ObservationMode::Sensors(1);
                }
            }
            "n_sensors" => self.observation = ObservationMode::Sensors(num(key, value)?),
            "n_train" => self.n_train = num(key, value)?,
            "horizon" => self.horizon = num(key, value)?,
            "n_modes" => self.n_modes = num(key, value)?,
            "data" => match value.trim() {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic(_)) {
                        self.data = DataSource::Synthetic(SyntheticWakeSpec::default());
                    }
                }
                "provided" => {}
                other => return Err(config_err(key, format!("expected synthetic or provided, got {other:?}"))),
            },
            "nx" => synthetic(self, key)?.grid.nx = num(key, value)?,
            "ny" => synthetic(self, key)?.grid.ny = num(key, value)?,
            "dx" => synthetic(self, key)?.grid.dx = num(key, value)?,
            "dy" => synthetic(self, key)?.grid.dy = num(key, value)?,
            "dt" => synthetic(self, key)?.grid.dt = num(key, value)?,
            "n_pairs" => synthetic(self, key)?.n_pairs = num(key, value)?,
            "base_period" => synthetic(self, key)?.base_period = num(key, value)?,
            "amplitudes" => {
                let amps = value
                    .split(',')
                    .map(|v| num::<f64>(key, v))
                    .collect::<Result<Vec<_>, _>>()?;
                synthetic(self, key)?.amplitudes = amps;
            }
            "free_stream" => synthetic(self, key)?.mean_flow.free_stream = num(key, value)?,
            "deficit" => synthetic(self, key)?.mean_flow.deficit = num(key, value)?,
            "data_seed" => synthetic(self, key)?.seed = num(key, value)?,
            "eps_std" => self.noise.eps_std = num(key, value)?,
            "kernel_std" => self.noise.kernel_std = num(key, value)?,
            "noise_seed" => self.noise.seed = num(key, value)?,
            "n_reservoir" => self.esn.n_reservoir = num(key, value)?,
            "rho" => self.esn.spectral_radius = num(key, value)?,
            "sigma_in" => self.esn.input_scaling = num(key, value)?,
            "connectivity" => self.esn.connectivity = num(key, value)?,
            "tikhonov" => self.esn.tikhonov = num(key, value)?,
            "input_bias" => self.esn.input_bias = num(key, value)?,
            "washout" => self.esn.washout = num(key, value)?,
            "esn_seed" => self.esn.seed = num(key, value)?,
            "background_lag" => self.background_lag = num(key, value)?,
            "spread_phi" => self.spreads.phi_rel = num(key, value)?,
            "spread_r" => self.spreads.r = num(key, value)?,
            "spread_alpha" => self.spreads.alpha_rel = num(key, value)?,
            "inflation" => self.inflation = num(key, value)?,
            "ensemble_seed" => self.ensemble_seed = num(key, value)?,
            "grid_search" => self.grid_search = flag(key, value)?,
            "record_log" => self.record_log = flag(key, value)?,
            "seed" => *self = self.clone().with_seed(num(key, value)?),
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(&format!("line {}", n + 1), format!("expected key=value, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Trained pieces shared by the assimilation runs.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub truth: SnapshotSet,
    pub noisy: SnapshotSet,
    pub basis: PodBasis,
    pub model: EsnModel,
}

/// Generate or load the truth, add noise, fit the POD on the noisy training
/// window and train the ESN on its coefficients.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedModel, HarnessError> {
    cfg.validate()?;
    let needed = cfg.n_train + cfg.horizon;
    let truth = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let spec = SyntheticWakeSpec { nt: needed, ..spec.clone() };
            generate_synthetic_wake(&spec).map_err(stage("data"))?
        }
        DataSource::Provided(d) => {
            if d.nt() < needed {
                return Err(HarnessError::Stage {
                    stage: "data",
                    message: format!("{} snapshots, need n_train + horizon = {needed}", d.nt()),
                });
            }
            d.slice(0..needed)
        }
    };
    let noisy = add_convolved_noise(&truth, &cfg.noise).map_err(stage("noise"))?;
    let basis = compute_pod(&noisy.slice(0..cfg.n_train), cfg.n_modes).map_err(stage("pod"))?;
    let reservoir = build_reservoir(&cfg.esn, cfg.n_modes).map_err(stage("esn"))?;
    let series = &basis.temporal_coeffs;
    let reservoir = if cfg.grid_search {
        let valid_len = (cfg.n_train / 4).max(1);
        let split = ValidationSplit {
            train_len: cfg.n_train - valid_len,
            valid_len,
        };
        let (sigmas, rhos) = default_search_grid();
        let best = grid_search_hyperparams(&reservoir, series, &split, &sigmas, &rhos).map_err(stage("esn"))?;
        reservoir.with_hyperparams(best.input_scaling, best.spectral_radius)
    } else {
        reservoir
    };
    let model = reservoir.train(series).map_err(stage("esn"))?;
    Ok(PreparedModel {
        truth,
        noisy,
        basis,
        model,
    })
}

/// Per-coefficient variance of pure observation noise after projection,
/// estimated from `samples` independent noise fields.
pub fn projected_noise_variance(basis: &PodBasis, noise: &NoiseModel, samples: usize) -> DVector<f64> {
    let grid = basis.grid;
    let npts = grid.n_points();
    let probe = NoiseModel {
        seed: noise.seed ^ 0x6e6f_6973_6576_6172,
        ..*noise
    };
    let mut acc = DVector::zeros(basis.n_modes());
    for k in 0..samples {
        let (ex, ey) = probe.sample(&grid, k);
        let mut eta = DVector::zeros(2 * npts);
        eta.rows_mut(0, npts).copy_from_slice(&ex);
        eta.rows_mut(npts, npts).copy_from_slice(&ey);
        let mut phi = basis.modes.tr_mul(&eta);
        phi.component_div_assign(&basis.singular_values);
        acc += phi.map(|v| v * v);
    }
    (acc / samples.max(1) as f64).map(|v| v.max(VARIANCE_FLOOR))
}

const VARIANCE_FLOOR: f64 = 1e-12;

/// Threshold on the largest state anomaly below which an ensemble counts as
/// collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 1e-8;

pub fn is_collapsed(ens: &AugmentedEnsemble) -> bool {
    ens.max_anomaly() < COLLAPSE_THRESHOLD
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub time_index: usize,
    pub event: &'static str,
    pub member: usize,
    pub slice: &'static str,
    pub values: Vec<f64>,
}

/// Time series of one twin experiment. Index `s - 1` holds step `s` after
/// the end of the training window, `s = 1..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub grid: Grid,
    pub mse_members: Vec<Vec<f64>>,
    pub mse_mean: Vec<f64>,
    pub noisy_baseline: Vec<f64>,
    pub spread_phi: Vec<f64>,
    pub spread_alpha: Vec<f64>,
    pub max_anomaly: Vec<f64>,
    /// Leading coefficient: ensemble min, mean, max and the projected truth.
    pub phi1: Vec<[f64; 4]>,
    pub analysis_times: Vec<usize>,
    pub diverged_members: usize,
    pub energy_fraction: f64,
    pub hyperparams: (f64, f64),
    pub final_mean_field: DVector<f64>,
    pub final_truth: DVector<f64>,
    pub log: Vec<LogRow>,
}

impl RunResult {
    pub fn horizon(&self) -> usize {
        self.mse_mean.len()
    }

    pub fn final_mse(&self) -> f64 {
        *self.mse_mean.last().expect("nonempty run")
    }

    pub fn mean_baseline(&self) -> f64 {
        self.noisy_baseline.iter().sum::<f64>() / self.noisy_baseline.len() as f64
    }

    /// First step at which the ensemble-mean MSE is below the noisy-data MSE.
    pub fn time_to_cross(&self) -> Option<usize> {
        self.mse_mean
            .iter()
            .zip(&self.noisy_baseline)
            .position(|(m, b)| m < b)
            .map(|i| i + 1)
    }

    /// Ensemble collapsed before half the horizon.
    pub fn collapsed(&self) -> bool {
        let half = self.horizon() / 2;
        self.max_anomaly.iter().take(half).any(|a| *a < COLLAPSE_THRESHOLD)
    }

    /// Steps from the first analysis on where the mean MSE exceeds the
    /// noisy baseline.
    pub fn steps_above_baseline_after_first_analysis(&self) -> usize {
        let Some(&first) = self.analysis_times.first() else {
            return self.horizon();
        };
        (first - 1..self.horizon())
            .filter(|&i| self.mse_mean[i] >= self.noisy_baseline[i])
            .count()
    }

    /// `time_index,mse_mean,mse_min,mse_max,spread_phi,spread_alpha`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("time_index,mse_mean,mse_min,mse_max,spread_phi,spread_alpha\n");
        for i in 0..self.horizon() {
            let members = &self.mse_members[i];
            let lo = members.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                i + 1,
                self.mse_mean[i],
                lo,
                hi,
                self.spread_phi[i],
                self.spread_alpha[i]
            );
        }
        out
    }

    /// `time_index,mse_mean,noisy_mse,analysis`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("time_index,mse_mean,noisy_mse,analysis\n");
        for i in 0..self.horizon() {
            let a = self.analysis_times.contains(&(i + 1)) as u8;
            let _ = writeln!(out, "{},{},{},{}", i + 1, self.mse_mean[i], self.noisy_baseline[i], a);
        }
        out
    }

    /// `time_index,phi1_min,phi1_mean,phi1_max,phi1_truth`.
    pub fn phi1_csv(&self) -> String {
        let mut out = String::from("time_index,phi1_min,phi1_mean,phi1_max,phi1_truth\n");
        for (i, [lo, mean, hi, truth]) in self.phi1.iter().enumerate() {
            let _ = writeln!(out, "{},{lo},{mean},{hi},{truth}", i + 1);
        }
        out
    }

    /// `time_index,member,mse`.
    pub fn members_csv(&self) -> String {
        let mut out = String::from("time_index,member,mse\n");
        for (i, row) in self.mse_members.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{j},{v}", i + 1);
            }
        }
        out
    }

    /// `time_index,event,member,slice,value...`.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("time_index,event,member,slice,value...\n");
        for row in &self.log {
            let _ = write!(out, "{},{},{},{}", row.time_index, row.event, row.member, row.slice);
            for v in &row.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn log_members(log: &mut Vec<LogRow>, ens: &AugmentedEnsemble, time_index: usize, event: &'static str) {
    for j in 0..ens.m() {
        log.push(LogRow {
            time_index,
            event,
            member: j,
            slice: "phi",
            values: ens.phi(j).iter().copied().collect(),
        });
        log.push(LogRow {
            time_index,
            event,
            member: j,
            slice: "r",
            values: ens.r(j).iter().copied().collect(),
        });
        if let Some(alpha) = ens.alpha(j) {
            log.push(LogRow {
                time_index,
                event,
                member: j,
                slice: "alpha",
                values: alpha.iter().copied().collect(),
            });
        }
    }
}

/// Observation operator, error covariance and a closure producing `d` at an
/// absolute snapshot index.
struct ObservationSetup {
    operator: MeasurementOperator,
    c_dd: DVector<f64>,
    sensors: Option<SensorSet>,
}

fn observation_setup(cfg: &ExperimentConfig, basis: &PodBasis) -> Result<ObservationSetup, HarnessError> {
    match cfg.observation {
        ObservationMode::FullField => Ok(ObservationSetup {
            operator: MeasurementOperator::PodCoefficients,
            c_dd: projected_noise_variance(basis, &cfg.noise, 100),
            sensors: None,
        }),
        ObservationMode::Sensors(n) => {
            let sensors = basis.select_sensors(n).map_err(stage("sensors"))?;
            let probe = SensorProbe::new(basis, &sensors);
            let var = (cfg.noise.eps_std * cfg.noise.eps_std).max(VARIANCE_FLOOR);
            Ok(ObservationSetup {
                c_dd: DVector::from_element(probe.len(), var),
                operator: MeasurementOperator::SparseSensors(probe),
                sensors: Some(sensors),
            })
        }
    }
}

pub fn run_twin_experiment(cfg: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    let prepared = prepare(cfg)?;
    assimilate(cfg, &prepared)
}

/// Assimilation loop on an already prepared model.
pub fn assimilate(cfg: &ExperimentConfig, prepared: &PreparedModel) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let PreparedModel {
        truth,
        noisy,
        basis,
        model,
    } = prepared;
    let npts = basis.grid.n_points();
    let obs_setup = observation_setup(cfg, basis)?;

    let coeffs = &basis.temporal_coeffs;
    let rms = (coeffs.norm_squared() / coeffs.len() as f64).sqrt();
    let spreads = Spreads {
        phi: cfg.spreads.phi_rel * rms,
        r: cfg.spreads.r,
        alpha_rel: cfg.spreads.alpha_rel,
    };
    let hist_len = (cfg.esn.washout + 1).min(cfg.n_train - cfg.background_lag);
    let end = cfg.n_train - cfg.background_lag;
    let history: DMatrix<f64> = coeffs.rows(end - hist_len, hist_len).into_owned();
    let mut ens = init_ensemble(
        cfg.scenario,
        model,
        obs_setup.operator.clone(),
        &history,
        &spreads,
        cfg.m,
        cfg.ensemble_seed,
    )
    .map_err(stage("ensemble"))?;
    let factorization = model.factorize_output();
    let t0 = cfg.n_train - 1;

    let mut res = RunResult {
        label: cfg.label(),
        grid: basis.grid,
        mse_members: Vec::with_capacity(cfg.horizon),
        mse_mean: Vec::with_capacity(cfg.horizon),
        noisy_baseline: Vec::with_capacity(cfg.horizon),
        spread_phi: Vec::with_capacity(cfg.horizon),
        spread_alpha: Vec::with_capacity(cfg.horizon),
        max_anomaly: Vec::with_capacity(cfg.horizon),
        phi1: Vec::with_capacity(cfg.horizon),
        analysis_times: Vec::new(),
        diverged_members: 0,
        energy_fraction: basis.energy_fraction,
        hyperparams: (model.config.input_scaling, model.config.spectral_radius),
        final_mean_field: DVector::zeros(0),
        final_truth: DVector::zeros(0),
        log: Vec::new(),
    };
    let mut diverged = vec![false; cfg.m];

    for s in 1..=cfg.horizon {
        let t = t0 + s;
        let (next, flags) = ens.forecast(model, Some(&factorization), 1).map_err(stage("forecast"))?;
        ens = next;
        for (d, f) in diverged.iter_mut().zip(flags) {
            *d |= f;
        }
        if cfg.record_log {
            log_members(&mut res.log, &ens, s, "forecast");
        }

        if s % cfg.delta == 0 {
            let field = noisy.stacked(t);
            let d = match &obs_setup.sensors {
                None => basis.project(&field).map_err(stage("observation"))?,
                Some(sensors) => sensors.sample(&field, npts),
            };
            let obs = Observation {
                d,
                c_dd: obs_setup.c_dd.clone(),
                time_index: s,
            };
            if cfg.inflation > 1.0 {
                ens = ens.inflate(cfg.inflation).map_err(stage("analysis"))?;
            }
            ens = ens.analysis_update(&obs).map_err(stage("analysis"))?;
            res.analysis_times.push(s);
            if cfg.record_log {
                log_members(&mut res.log, &ens, s, "analysis");
            }
        }

        let truth_t = truth.stacked(t);
        let members: Vec<f64> = (0..ens.m())
            .map(|j| mse(&basis.reconstruct(&ens.phi(j)), &truth_t))
            .collect::<Result<_, _>>()?;
        let mean_field = basis.reconstruct(&ens.mean_phi());
        res.mse_mean.push(mse(&mean_field, &truth_t)?);
        res.mse_members.push(members);
        res.noisy_baseline.push(mse(&noisy.stacked(t), &truth_t)?);
        res.spread_phi.push(ens.spread(ens.layout.phi()));
        res.spread_alpha.push(ens.spread(ens.layout.alpha()));
        res.max_anomaly.push(ens.max_anomaly());
        let firsts: Vec<f64> = (0..ens.m()).map(|j| ens.phi(j)[0]).collect();
        let truth_phi = basis.project(&truth_t).map_err(stage("scoring"))?;
        res.phi1.push([
            firsts.iter().copied().fold(f64::INFINITY, f64::min),
            ens.mean_phi()[0],
            firsts.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            truth_phi[0],
        ]);
        if s == cfg.horizon {
            res.final_mean_field = mean_field;
            res.final_truth = truth_t;
        }
    }
    res.diverged_members = diverged.iter().filter(|d| **d).count();
    Ok(res)
}

/// Write a run directory: config echo, CSV series and the final ensemble-mean
/// field next to the truth as a two-snapshot container.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, res: &RunResult) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_key_value_text())?;
    fs::write(dir.join("summary.csv"), res.summary_csv())?;
    fs::write(dir.join("series.csv"), res.series_csv())?;
    fs::write(dir.join("members_mse.csv"), res.members_csv())?;
    fs::write(dir.join("phi1.csv"), res.phi1_csv())?;
    if !res.log.is_empty() {
        fs::write(dir.join("log.csv"), res.log_csv())?;
    }
    let fields = [res.final_mean_field.clone(), res.final_truth.clone()];
    let snaps = SnapshotSet::from_stacked(res.grid, &fields, 0.0)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    Container::from_snapshots(snaps)
        .write(dir.join("final_fields.rcas"))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub final_mse: Option<f64>,
    pub mean_baseline: Option<f64>,
    pub time_to_cross: Option<usize>,
    pub collapsed: Option<bool>,
    pub error: Option<String>,
}

/// Run every configuration; failures are recorded and the sweep continues.
pub fn sweep(cfgs: &[ExperimentConfig]) -> Result<(Vec<Result<RunResult, HarnessError>>, Vec<SweepRow>), HarnessError> {
    if cfgs.is_empty() {
        return Err(config_err("sweep", "no configurations"));
    }
    #[cfg(feature = "parallel")]
    let results: Vec<Result<RunResult, HarnessError>> = {
        use rayon::prelude::*;
        cfgs.par_iter().map(run_twin_experiment).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<RunResult, HarnessError>> = cfgs.iter().map(run_twin_experiment).collect();

    let rows = cfgs
        .iter()
        .zip(&results)
        .map(|(cfg, r)| match r {
            Ok(r) => SweepRow {
                label: cfg.label(),
                final_mse: Some(r.final_mse()),
                mean_baseline: Some(r.mean_baseline()),
                time_to_cross: r.time_to_cross(),
                collapsed: Some(r.collapsed()),
                error: None,
            },
            Err(e) => SweepRow {
                label: cfg.label(),
                final_mse: None,
                mean_baseline: None,
                time_to_cross: None,
                collapsed: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok((results, rows))
}

/// `label,final_mse,mean_noisy_mse,time_to_cross,collapsed,error`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut out = String::from("label,final_mse,mean_noisy_mse,time_to_cross,collapsed,error\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label,
            opt(r.final_mse.map(|v| v.to_string())),
            opt(r.mean_baseline.map(|v| v.to_string())),
            opt(r.time_to_cross.map(|v| v.to_string())),
            opt(r.collapsed.map(|v| v.to_string())),
            opt(r.error.as_ref().map(|e| e.replace(',', ";")))
        );
    }
    out
}
