//! Echo state network over POD coefficients.
//!
//! The reservoir update is
//!
//! ```text
//! r_{k+1} = tanh(σ_in W_in [φ_k ⊙ g; δ] + ρ W r_k)
//! φ_{k+1} = W_out [r_{k+1}; 1]
//! ```
//!
//! `W` is stored with unit spectral radius; `ρ` and `σ_in` are applied at
//! step time so the hyperparameter search can reuse one reservoir draw.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EsnError {
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("reservoir matrix has zero spectral radius after {attempts} draws")]
    DegenerateReservoir { attempts: usize },
    #[error("sequence of {len} steps is too short for a washout of {washout}")]
    SequenceTooShort { len: usize, washout: usize },
    #[error("normal matrix is singular; use tikhonov > 0")]
    SingularNormalMatrix,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("every hyperparameter candidate diverged: {grid}")]
    AllCandidatesDiverged { grid: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsnConfig {
    pub n_reservoir: usize,
    pub spectral_radius: f64,
    pub input_scaling: f64,
    /// Average number of nonzeros per reservoir row.
    pub connectivity: f64,
    pub tikhonov: f64,
    pub input_bias: f64,
    pub washout: usize,
    pub seed: u64,
}

impl Default for EsnConfig {
    fn default() -> Self {
        Self {
            n_reservoir: 40,
            spectral_radius: 0.976,
            input_scaling: 0.890,
            connectivity: 3.0,
            tikhonov: 1e-6,
            input_bias: 0.1,
            washout: 50,
            seed: 0,
        }
    }
}

impl EsnConfig {
    pub fn validate(&self) -> Result<(), EsnError> {
        let bad = |field, reason: String| Err(EsnError::InvalidConfig { field, reason });
        if self.n_reservoir < 1 {
            return bad("n_reservoir", "must be at least 1".into());
        }
        if !(self.spectral_radius > 0.0) {
            return bad("spectral_radius", format!("{} must be positive", self.spectral_radius));
        }
        if !(self.input_scaling > 0.0) {
            return bad("input_scaling", format!("{} must be positive", self.input_scaling));
        }
        if !(self.tikhonov >= 0.0) {
            return bad("tikhonov", format!("{} must be nonnegative", self.tikhonov));
        }
        if !(self.connectivity >= 1.0 && self.connectivity <= self.n_reservoir as f64) {
            return bad(
                "connectivity",
                format!("{} outside [1, {}]", self.connectivity, self.n_reservoir),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsnModel {
    pub config: EsnConfig,
    /// `N_r × (N_m + 1)`, one nonzero per row.
    pub w_in: DMatrix<f64>,
    /// `N_r × N_r`, unit spectral radius.
    pub w: DMatrix<f64>,
    /// `N_m × (N_r + 1)`.
    pub w_out: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Largest absolute training coefficient; zero until trained.
    pub phi_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsnState {
    pub r: DVector<f64>,
    pub phi: DVector<f64>,
}

/// Spectral radius via the real Schur form.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

const MAX_RESERVOIR_DRAWS: usize = 10;

pub fn build_reservoir(config: &EsnConfig, n_inputs: usize) -> Result<EsnModel, EsnError> {
    config.validate()?;
    if n_inputs == 0 {
        return Err(EsnError::InvalidConfig {
            field: "n_inputs",
            reason: "must be at least 1".into(),
        });
    }
    let nr = config.n_reservoir;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w_in = DMatrix::zeros(nr, n_inputs + 1);
    for i in 0..nr {
        let col = rng.random_range(0..n_inputs + 1);
        w_in[(i, col)] = rng.random_range(-1.0..=1.0);
    }

    let density = config.connectivity / nr as f64;
    for attempt in 0..MAX_RESERVOIR_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + attempt as u64);
        let w = DMatrix::from_fn(nr, nr, |_, _| {
            // always consume both draws so the pattern is independent of density
            let keep: f64 = rng.random();
            let value = rng.random_range(-1.0..=1.0);
            if keep < density {
                value
            } else {
                0.0
            }
        });
        let radius = spectral_radius(&w);
        if radius > 1e-12 {
            return Ok(EsnModel {
                config: config.clone(),
                w_in,
                w: w / radius,
                w_out: DMatrix::zeros(n_inputs, nr + 1),
                g: DVector::from_element(n_inputs, 1.0),
                phi_scale: 0.0,
            });
        }
    }
    Err(EsnError::DegenerateReservoir {
        attempts: MAX_RESERVOIR_DRAWS,
    })
}

impl EsnModel {
    pub fn n_reservoir(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.g.len()
    }

    pub fn with_hyperparams(&self, input_scaling: f64, spectral_radius: f64) -> Self {
        let mut m = self.clone();
        m.config.input_scaling = input_scaling;
        m.config.spectral_radius = spectral_radius;
        m
    }

    /// Reservoir half of the update.
    pub fn advance(&self, r: &DVector<f64>, phi_in: &DVector<f64>) -> DVector<f64> {
        let nm = self.n_inputs();
        let mut input = DVector::zeros(nm + 1);
        for i in 0..nm {
            input[i] = phi_in[i] * self.g[i];
        }
        input[nm] = self.config.input_bias;
        let mut pre = &self.w_in * input * self.config.input_scaling;
        pre.gemv(self.config.spectral_radius, &self.w, r, 1.0);
        pre.map(f64::tanh)
    }

    pub fn readout(&self, r: &DVector<f64>) -> DVector<f64> {
        readout(&self.w_out, r)
    }

    pub fn step(&self, state: &EsnState, phi_in: &DVector<f64>) -> EsnState {
        self.step_with(&self.w_out, state, phi_in)
    }

    /// Step with an externally supplied output matrix.
    pub fn step_with(&self, w_out: &DMatrix<f64>, state: &EsnState, phi_in: &DVector<f64>) -> EsnState {
        let r = self.advance(&state.r, phi_in);
        let phi = readout(w_out, &r);
        EsnState { r, phi }
    }

    fn check_inputs(&self, series: &DMatrix<f64>) -> Result<(), EsnError> {
        if series.ncols() != self.n_inputs() {
            return Err(EsnError::DimensionMismatch {
                expected: self.n_inputs(),
                got: series.ncols(),
            });
        }
        Ok(())
    }

    /// Teacher-forced run from `r0`. Returns `r_1..r_{T-1}` as columns, where
    /// `r_{k+1}` is produced by input row `k`.
    pub fn drive(&self, series: &DMatrix<f64>, r0: &DVector<f64>) -> Result<DMatrix<f64>, EsnError> {
        self.check_inputs(series)?;
        let t = series.nrows();
        let mut states = DMatrix::zeros(self.n_reservoir(), t.saturating_sub(1));
        let mut r = r0.clone();
        for k in 0..t.saturating_sub(1) {
            r = self.advance(&r, &series.row(k).transpose());
            states.set_column(k, &r);
        }
        Ok(states)
    }

    /// Teacher-forced states from `r = 0` after discarding the washout.
    /// Column `j` is aligned with target row `washout + 1 + j`.
    pub fn open_loop(&self, series: &DMatrix<f64>) -> Result<DMatrix<f64>, EsnError> {
        self.open_loop_from(series, &DVector::zeros(self.n_reservoir()))
    }

    pub fn open_loop_from(&self, series: &DMatrix<f64>, r0: &DVector<f64>) -> Result<DMatrix<f64>, EsnError> {
        let washout = self.config.washout;
        if series.nrows() < washout + 2 {
            return Err(EsnError::SequenceTooShort {
                len: series.nrows(),
                washout,
            });
        }
        let all = self.drive(series, r0)?;
        let n = all.ncols() - washout;
        Ok(all.columns(washout, n).into_owned())
    }

    /// Washout states with a constant-one row appended, and the aligned
    /// targets as columns.
    pub fn training_design(&self, series: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), EsnError> {
        let states = self.open_loop(series)?;
        let n = states.ncols();
        let nr = self.n_reservoir();
        let mut design = DMatrix::from_element(nr + 1, n, 1.0);
        design.view_mut((0, 0), (nr, n)).copy_from(&states);
        let start = self.config.washout + 1;
        let targets = series.rows(start, n).transpose();
        Ok((design, targets))
    }

    /// Ridge fit of `w_out`. Sets `g` to the inverse range of each training
    /// coefficient before collecting states.
    pub fn train(&self, series: &DMatrix<f64>) -> Result<EsnModel, EsnError> {
        self.check_inputs(series)?;
        if series.nrows() < self.config.washout + 2 {
            return Err(EsnError::SequenceTooShort {
                len: series.nrows(),
                washout: self.config.washout,
            });
        }
        let mut model = self.clone();
        model.g = range_normalization(series);
        model.phi_scale = series.amax();
        let (design, targets) = model.training_design(series)?;
        model.w_out = ridge_solve(&design, &targets, self.config.tikhonov)?;
        Ok(model)
    }

    /// Reservoir state after teacher-forcing all but the last row of
    /// `history`; the last row becomes the current coefficient estimate.
    pub fn warm_up(&self, history: &DMatrix<f64>) -> Result<EsnState, EsnError> {
        self.check_inputs(history)?;
        if history.nrows() == 0 {
            return Err(EsnError::SequenceTooShort { len: 0, washout: 0 });
        }
        let states = self.drive(history, &DVector::zeros(self.n_reservoir()))?;
        let r = if states.ncols() == 0 {
            DVector::zeros(self.n_reservoir())
        } else {
            states.column(states.ncols() - 1).into_owned()
        };
        Ok(EsnState {
            r,
            phi: history.row(history.nrows() - 1).transpose(),
        })
    }

    pub fn closed_loop(&self, state0: &EsnState, n_steps: usize) -> Forecast {
        self.closed_loop_with(&self.w_out, state0, n_steps)
    }

    /// Autonomous forecast feeding each prediction back as the next input.
    /// Row 0 of the trajectory is the initial estimate.
    pub fn closed_loop_with(&self, w_out: &DMatrix<f64>, state0: &EsnState, n_steps: usize) -> Forecast {
        let mut phis = DMatrix::zeros(n_steps + 1, self.n_inputs());
        phis.set_row(0, &state0.phi.transpose());
        let mut state = state0.clone();
        let mut diverged = false;
        for k in 1..=n_steps {
            let input = state.phi.clone();
            state = self.step_with(w_out, &state, &input);
            diverged |= self.is_diverged(&state.phi);
            phis.set_row(k, &state.phi.transpose());
        }
        Forecast {
            phis,
            state,
            diverged,
        }
    }

    /// Any coefficient beyond 100 times the training maximum, or non-finite.
    pub fn is_diverged(&self, phi: &DVector<f64>) -> bool {
        let limit = 100.0 * self.phi_scale;
        phi.iter().any(|v| !v.is_finite() || (self.phi_scale > 0.0 && v.abs() > limit))
    }

    pub fn factorize_output(&self) -> OutputFactorization {
        OutputFactorization::new(&self.w_out)
    }
}

fn readout(w_out: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let nr = r.len();
    let mut phi = w_out.columns(0, nr) * r;
    phi += w_out.column(nr);
    phi
}

/// `g_i = 1 / (max_k Φ[k,i] - min_k Φ[k,i])`, or 1 for a constant column.
pub fn range_normalization(series: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        series.ncols(),
        series.column_iter().map(|c| {
            let range = c.max() - c.min();
            if range > 0.0 {
                1.0 / range
            } else {
                1.0
            }
        }),
    )
}

/// Solve `(X Xᵀ + λ I) Wᵀ = X Yᵀ` for `W`, with `X` the design (features ×
/// samples) and `Y` the targets (outputs × samples).
pub fn ridge_solve(design: &DMatrix<f64>, targets: &DMatrix<f64>, tikhonov: f64) -> Result<DMatrix<f64>, EsnError> {
    let n = design.nrows();
    let mut normal = design * design.transpose();
    for i in 0..n {
        normal[(i, i)] += tikhonov;
    }
    let rhs = design * targets.transpose();
    let chol = normal.cholesky().ok_or(EsnError::SingularNormalMatrix)?;
    let diag_min = chol.l_dirty().diagonal().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let diag_max = chol.l_dirty().diagonal().amax();
    if !(diag_min > 1e-7 * diag_max) {
        return Err(EsnError::SingularNormalMatrix);
    }
    Ok(chol.solve(&rhs).transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub phis: DMatrix<f64>,
    pub state: EsnState,
    pub diverged: bool,
}

/// Thin SVD `W_out = X diag(α) Vᵀ` with `α` nonincreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFactorization {
    pub x_factor: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub v_factor: DMatrix<f64>,
}

impl OutputFactorization {
    pub fn new(w_out: &DMatrix<f64>) -> Self {
        let svd = w_out.clone().svd(true, true);
        let u = svd.u.expect("left vectors requested");
        let v_t = svd.v_t.expect("right vectors requested");
        let k = svd.singular_values.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let mut x_factor = DMatrix::zeros(u.nrows(), k);
        let mut v_factor = DMatrix::zeros(v_t.ncols(), k);
        let mut alpha = DVector::zeros(k);
        for (col, &src) in order.iter().enumerate() {
            x_factor.set_column(col, &u.column(src));
            v_factor.set_column(col, &v_t.row(src).transpose());
            alpha[col] = svd.singular_values[src];
        }
        Self {
            x_factor,
            alpha,
            v_factor,
        }
    }

    pub fn recompose(&self) -> DMatrix<f64> {
        self.recompose_with(&self.alpha)
    }

    /// `X diag(alpha) Vᵀ` with the stored singular vectors.
    pub fn recompose_with(&self, alpha: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.x_factor.clone();
        for (mut col, a) in scaled.column_iter_mut().zip(alpha.iter()) {
            col *= *a;
        }
        scaled * self.v_factor.transpose()
    }
}

/// Held-out split for the hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSplit {
    pub train_len: usize,
    pub valid_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub input_scaling: f64,
    pub spectral_radius: f64,
    pub validation_mse: f64,
    /// `(σ_in, ρ, mse)` for every candidate, `None` when it diverged.
    pub scores: Vec<(f64, f64, Option<f64>)>,
}

/// `n` points log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// 8 log-spaced input scalings on [0.5, 50] and 8 spectral radii on [0.2, 1.05].
pub fn default_search_grid() -> (Vec<f64>, Vec<f64>) {
    (log_grid(0.5, 50.0, 8), linear_grid(0.2, 1.05, 8))
}

/// Score one candidate: train on the first part of `series`, forecast the
/// validation window in closed loop, return the coefficient MSE.
pub fn validation_score(
    reservoir: &EsnModel,
    series: &DMatrix<f64>,
    split: &ValidationSplit,
    input_scaling: f64,
    spectral_radius: f64,
) -> Result<Option<f64>, EsnError> {
    let train = series.rows(0, split.train_len).into_owned();
    let model = reservoir.with_hyperparams(input_scaling, spectral_radius).train(&train)?;
    let state = model.warm_up(&train)?;
    let forecast = model.closed_loop(&state, split.valid_len);
    if forecast.diverged {
        return Ok(None);
    }
    let truth = series.rows(split.train_len, split.valid_len);
    let pred = forecast.phis.rows(1, split.valid_len);
    let mse = (pred - truth).norm_squared() / (split.valid_len * series.ncols()) as f64;
    Ok(if mse.is_finite() { Some(mse) } else { None })
}

/// Exhaustive search over `input_scalings × spectral_radii`. Ties go to the
/// smaller spectral radius, then the smaller input scaling.
pub fn grid_search_hyperparams(
    reservoir: &EsnModel,
    series: &DMatrix<f64>,
    split: &ValidationSplit,
    input_scalings: &[f64],
    spectral_radii: &[f64],
) -> Result<GridSearchResult, EsnError> {
    if input_scalings.is_empty() || spectral_radii.is_empty() {
        return Err(EsnError::InvalidConfig {
            field: "grid",
            reason: "empty candidate list".into(),
        });
    }
    if split.valid_len == 0 || split.train_len + split.valid_len > series.nrows() {
        return Err(EsnError::InvalidConfig {
            field: "split",
            reason: format!(
                "{} + {} steps do not fit a series of {}",
                split.train_len,
                split.valid_len,
                series.nrows()
            ),
        });
    }
    let candidates: Vec<(f64, f64)> = input_scalings
        .iter()
        .flat_map(|&s| spectral_radii.iter().map(move |&r| (s, r)))
        .collect();
    let score = |&(s, r): &(f64, f64)| validation_score(reservoir, series, split, s, r).map(|m| (s, r, m));

    #[cfg(feature = "parallel")]
    let scores: Result<Vec<_>, EsnError> = {
        use rayon::prelude::*;
        candidates.par_iter().map(score).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let scores: Result<Vec<_>, EsnError> = candidates.iter().map(score).collect();
    let scores = scores?;

    let best = scores
        .iter()
        .filter_map(|&(s, r, m)| m.map(|m| (s, r, m)))
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.1.total_cmp(&b.1)).then(a.0.total_cmp(&b.0)));
    match best {
        Some((s, r, m)) => Ok(GridSearchResult {
            input_scaling: s,
            spectral_radius: r,
            validation_mse: m,
            scores,
        }),
        None => Err(EsnError::AllCandidatesDiverged {
            grid: format!("input_scaling {input_scalings:?} x spectral_radius {spectral_radii:?}"),
        }),
    }
}
