//! Deterministic ensemble square-root Kalman filter on the augmented state
//! `ẑ = [z; M(z)]`.
//!
//! Because the predicted observations are carried inside the state, the
//! measurement operator of the update is the selection `[0 | I]` and the
//! nonlinear (here affine) map only enters when each member's observation
//! block is recomputed from its coefficients.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::esn::{EsnError, EsnModel, EsnState, OutputFactorization};
use crate::pod::SensorProbe;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DaError {
    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("innovation covariance is numerically singular; increase c_dd or inflate the ensemble")]
    SingularInnovation,
    #[error("inflation factor {0} must be >= 1")]
    InflationFactor(f64),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Esn(#[from] EsnError),
}

/// Which parts of the augmented state the analysis updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Coefficients only.
    PhysicalOnly,
    /// Coefficients and reservoir state.
    TwoFold,
    /// Coefficients, reservoir state and readout singular values.
    ThreeFold,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::PhysicalOnly => "physical",
            Scenario::TwoFold => "twofold",
            Scenario::ThreeFold => "threefold",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "physical" | "physicalonly" | "physical-only" | "naive" => Some(Scenario::PhysicalOnly),
            "twofold" | "two-fold" => Some(Scenario::TwoFold),
            "threefold" | "three-fold" => Some(Scenario::ThreeFold),
            _ => None,
        }
    }

    pub fn updates_reservoir(self) -> bool {
        !matches!(self, Scenario::PhysicalOnly)
    }

    pub fn updates_parameters(self) -> bool {
        matches!(self, Scenario::ThreeFold)
    }
}

/// Observation map applied to a member's coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementOperator {
    /// `M(z) = φ`.
    PodCoefficients,
    /// `M(z) = [ux(x_q); uy(x_q)]` of the reconstructed field.
    SparseSensors(SensorProbe),
}

impl MeasurementOperator {
    pub fn n_obs(&self, n_modes: usize) -> usize {
        match self {
            MeasurementOperator::PodCoefficients => n_modes,
            MeasurementOperator::SparseSensors(p) => p.len(),
        }
    }

    pub fn apply(&self, phi: &DVector<f64>) -> DVector<f64> {
        match self {
            MeasurementOperator::PodCoefficients => phi.clone(),
            MeasurementOperator::SparseSensors(p) => p.measure(phi),
        }
    }
}

/// Row offsets of each slice inside a member column: `[φ; r; α; M(z)]`.
/// `α` is present only for three-fold estimation; `r` is always stored so
/// members can be forecast, but is only analysed when the scenario says so.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_phi: usize,
    pub n_r: usize,
    pub n_alpha: usize,
    pub n_obs: usize,
}

impl Layout {
    pub fn new(scenario: Scenario, n_phi: usize, n_r: usize, n_obs: usize) -> Self {
        Self {
            n_phi,
            n_r,
            n_alpha: if scenario.updates_parameters() { n_phi } else { 0 },
            n_obs,
        }
    }

    pub fn phi(&self) -> Range<usize> {
        0..self.n_phi
    }

    pub fn r(&self) -> Range<usize> {
        self.n_phi..self.n_phi + self.n_r
    }

    pub fn alpha(&self) -> Range<usize> {
        let s = self.n_phi + self.n_r;
        s..s + self.n_alpha
    }

    pub fn obs(&self) -> Range<usize> {
        let s = self.n_phi + self.n_r + self.n_alpha;
        s..s + self.n_obs
    }

    pub fn len(&self) -> usize {
        self.n_phi + self.n_r + self.n_alpha + self.n_obs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// State rows updated by the analysis for `scenario`, in order.
    pub fn state_rows(&self, scenario: Scenario) -> Vec<usize> {
        let mut rows: Vec<usize> = self.phi().collect();
        if scenario.updates_reservoir() {
            rows.extend(self.r());
        }
        if scenario.updates_parameters() {
            rows.extend(self.alpha());
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub d: DVector<f64>,
    /// Diagonal of the observation-error covariance.
    pub c_dd: DVector<f64>,
    pub time_index: usize,
}

impl Observation {
    pub fn validate(&self) -> Result<(), DaError> {
        if self.d.len() != self.c_dd.len() {
            return Err(DaError::InvalidObservation(format!(
                "{} values with {} variances",
                self.d.len(),
                self.c_dd.len()
            )));
        }
        if let Some(i) = self.c_dd.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DaError::InvalidObservation(format!("c_dd[{i}] = {} is not positive", self.c_dd[i])));
        }
        Ok(())
    }
}

/// Ensemble mean and scaled anomalies `A = (Z - z̄) / √(m-1)`, so that the
/// sample covariance is `A Aᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub anomalies: DMatrix<f64>,
}

impl EnsembleStats {
    /// Dense covariance, only for dimensions up to ten times the ensemble
    /// size; larger states stay in factor form.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        if self.anomalies.nrows() > 10 * self.anomalies.ncols() {
            return None;
        }
        Some(&self.anomalies * self.anomalies.transpose())
    }
}

/// Column mean accumulated relative to the first member, so identical
/// members give their common value exactly.
fn member_mean(members: &DMatrix<f64>) -> DVector<f64> {
    let first = members.column(0).into_owned();
    let mut offset = DVector::zeros(members.nrows());
    for col in members.column_iter().skip(1) {
        offset += col - &first;
    }
    first + offset / members.ncols() as f64
}

pub fn ensemble_stats(members: &DMatrix<f64>) -> Result<EnsembleStats, DaError> {
    let m = members.ncols();
    if m < 2 {
        return Err(DaError::TooFewMembers(m));
    }
    let mean = member_mean(members);
    let mut anomalies = members.clone();
    let scale = 1.0 / ((m - 1) as f64).sqrt();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
        col *= scale;
    }
    Ok(EnsembleStats { mean, anomalies })
}

/// One square-root analysis on a bare ensemble matrix whose rows `obs_rows`
/// hold the predicted observations.
///
/// The mean is moved by the Kalman gain `K = A Yᵀ (Y Yᵀ + C_dd)⁻¹` and the
/// anomalies by the symmetric transform `T = (I + Yᵀ C_dd⁻¹ Y)^{-1/2}`, which
/// gives `Aᵃ Aᵃᵀ = (I - K M) A Aᵀ` and keeps the anomalies centred.
pub fn srkf_update(
    members: &DMatrix<f64>,
    obs_rows: Range<usize>,
    d: &DVector<f64>,
    c_dd: &DVector<f64>,
) -> Result<DMatrix<f64>, DaError> {
    let m = members.ncols();
    let p = obs_rows.len();
    if d.len() != p || c_dd.len() != p || obs_rows.end > members.nrows() {
        return Err(DaError::InvalidObservation(format!(
            "observation of length {} for an observation block of {p} rows",
            d.len()
        )));
    }
    let stats = ensemble_stats(members)?;
    let a = &stats.anomalies;
    let y = a.rows(obs_rows.start, p).into_owned();

    let mut s = &y * y.transpose();
    for i in 0..p {
        s[(i, i)] += c_dd[i];
    }
    let chol = s.cholesky().ok_or(DaError::SingularInnovation)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(lo > 1e-8 * hi) {
        return Err(DaError::SingularInnovation);
    }
    let innovation = d - stats.mean.rows(obs_rows.start, p);
    let weights = y.tr_mul(&chol.solve(&innovation));
    let mean = &stats.mean + a * weights;

    let mut scaled_y = y.clone();
    for i in 0..p {
        scaled_y.row_mut(i).scale_mut(1.0 / c_dd[i]);
    }
    let b = y.tr_mul(&scaled_y);
    let eig = b.symmetric_eigen();
    let mut root = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        root.column_mut(j).scale_mut(1.0 / (1.0 + lambda.max(0.0)).sqrt());
    }
    let transform = root * eig.eigenvectors.transpose();
    let transform = (&transform + transform.transpose()) * 0.5;

    let anomalies = a * transform;
    let spread = ((m - 1) as f64).sqrt();
    let mut out = anomalies * spread;
    for mut col in out.column_iter_mut() {
        col += &mean;
    }
    Ok(out)
}

/// Per-slice initial spreads. `alpha_rel` is relative to the trained
/// singular values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spreads {
    pub phi: f64,
    pub r: f64,
    pub alpha_rel: f64,
}

impl Default for Spreads {
    fn default() -> Self {
        Self {
            phi: 0.0,
            r: 0.0,
            alpha_rel: 0.0,
        }
    }
}

/// Ensemble members as columns laid out per [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEnsemble {
    pub scenario: Scenario,
    pub layout: Layout,
    pub members: DMatrix<f64>,
    pub operator: MeasurementOperator,
}

impl AugmentedEnsemble {
    /// Assemble from per-member coefficients, reservoir states and (for
    /// three-fold) singular values; the observation block is computed.
    pub fn from_parts(
        scenario: Scenario,
        operator: MeasurementOperator,
        phis: &DMatrix<f64>,
        rs: &DMatrix<f64>,
        alphas: Option<&DMatrix<f64>>,
    ) -> Result<Self, DaError> {
        let m = phis.ncols();
        if m < 2 {
            return Err(DaError::TooFewMembers(m));
        }
        if rs.ncols() != m {
            return Err(DaError::InvalidInput(format!("{} reservoir columns for {m} members", rs.ncols())));
        }
        let nm = phis.nrows();
        let layout = Layout::new(scenario, nm, rs.nrows(), operator.n_obs(nm));
        let mut members = DMatrix::zeros(layout.len(), m);
        members.view_mut((layout.phi().start, 0), (nm, m)).copy_from(phis);
        members.view_mut((layout.r().start, 0), (rs.nrows(), m)).copy_from(rs);
        if scenario.updates_parameters() {
            let alphas = alphas.ok_or_else(|| DaError::InvalidInput("three-fold estimation needs alpha".into()))?;
            if alphas.shape() != (nm, m) {
                return Err(DaError::InvalidInput(format!("alpha shape {:?}", alphas.shape())));
            }
            members.view_mut((layout.alpha().start, 0), (nm, m)).copy_from(alphas);
        }
        let mut ens = Self {
            scenario,
            layout,
            members,
            operator,
        };
        ens.refresh_observations();
        Ok(ens)
    }

    pub fn m(&self) -> usize {
        self.members.ncols()
    }

    pub fn phi(&self, j: usize) -> DVector<f64> {
        self.members.column(j).rows_range(self.layout.phi()).into_owned()
    }

    pub fn r(&self, j: usize) -> DVector<f64> {
        self.members.column(j).rows_range(self.layout.r()).into_owned()
    }

    pub fn alpha(&self, j: usize) -> Option<DVector<f64>> {
        (self.layout.n_alpha > 0).then(|| self.members.column(j).rows_range(self.layout.alpha()).into_owned())
    }

    pub fn observations(&self, j: usize) -> DVector<f64> {
        self.members.column(j).rows_range(self.layout.obs()).into_owned()
    }

    /// Mean coefficient vector across members.
    pub fn mean_phi(&self) -> DVector<f64> {
        member_mean(&self.members.rows_range(self.layout.phi()).into_owned())
    }

    pub fn stats(&self) -> Result<EnsembleStats, DaError> {
        ensemble_stats(&self.members)
    }

    /// Recompute `M(z)` from each member's coefficients.
    pub fn refresh_observations(&mut self) {
        let obs = self.layout.obs();
        for j in 0..self.m() {
            let y = self.operator.apply(&self.phi(j));
            self.members.column_mut(j).rows_range_mut(obs.clone()).copy_from(&y);
        }
    }

    /// Root-mean-square sample standard deviation over a slice.
    pub fn spread(&self, rows: Range<usize>) -> f64 {
        if rows.is_empty() || self.m() < 2 {
            return 0.0;
        }
        let block = self.members.rows_range(rows.clone());
        let mean = member_mean(&block.into_owned());
        let mut acc = 0.0;
        for col in block.column_iter() {
            acc += (col - &mean).norm_squared();
        }
        (acc / ((self.m() - 1) * rows.len()) as f64).sqrt()
    }

    /// Largest absolute deviation from the mean over the analysed state rows.
    pub fn max_anomaly(&self) -> f64 {
        let rows = self.layout.state_rows(self.scenario);
        let mean = member_mean(&self.members);
        let mut worst = 0.0f64;
        for j in 0..self.m() {
            for &i in &rows {
                worst = worst.max((self.members[(i, j)] - mean[i]).abs());
            }
        }
        worst
    }

    /// Advance every member `n_steps` in closed loop. In three-fold estimation
    /// each member reads out through `X diag(α_j) Vᵀ`. Returns the advanced
    /// ensemble and a per-member divergence flag.
    pub fn forecast(
        &self,
        model: &EsnModel,
        factorization: Option<&OutputFactorization>,
        n_steps: usize,
    ) -> Result<(AugmentedEnsemble, Vec<bool>), DaError> {
        if n_steps == 0 {
            return Err(DaError::InvalidInput("n_steps must be at least 1".into()));
        }
        if self.scenario.updates_parameters() && factorization.is_none() {
            return Err(DaError::InvalidInput("three-fold forecast needs the output factorization".into()));
        }
        let advance = |j: usize| -> (DVector<f64>, DVector<f64>, bool) {
            let w_out = match (self.alpha(j), factorization) {
                (Some(alpha), Some(f)) => f.recompose_with(&alpha),
                _ => model.w_out.clone(),
            };
            let state = EsnState {
                r: self.r(j),
                phi: self.phi(j),
            };
            let f = model.closed_loop_with(&w_out, &state, n_steps);
            (f.state.phi, f.state.r, f.diverged)
        };

        #[cfg(feature = "parallel")]
        let results: Vec<_> = {
            use rayon::prelude::*;
            (0..self.m()).into_par_iter().map(advance).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<_> = (0..self.m()).map(advance).collect();

        let mut next = self.clone();
        let mut diverged = Vec::with_capacity(self.m());
        for (j, (phi, r, div)) in results.into_iter().enumerate() {
            next.members.column_mut(j).rows_range_mut(self.layout.phi()).copy_from(&phi);
            next.members.column_mut(j).rows_range_mut(self.layout.r()).copy_from(&r);
            diverged.push(div);
        }
        next.refresh_observations();
        Ok((next, diverged))
    }

    /// Square-root analysis of the scenario's state rows plus the
    /// observation block. Negative singular values are clamped to zero.
    pub fn analysis_update(&self, obs: &Observation) -> Result<AugmentedEnsemble, DaError> {
        obs.validate()?;
        if obs.d.len() != self.layout.n_obs {
            return Err(DaError::InvalidObservation(format!(
                "{} values for an observation block of {}",
                obs.d.len(),
                self.layout.n_obs
            )));
        }
        let mut rows = self.layout.state_rows(self.scenario);
        let n_state = rows.len();
        rows.extend(self.layout.obs());
        let sub = self.members.select_rows(rows.iter());
        let updated = srkf_update(&sub, n_state..rows.len(), &obs.d, &obs.c_dd)?;

        let mut next = self.clone();
        for (k, &row) in rows.iter().take(n_state).enumerate() {
            next.members.row_mut(row).copy_from(&updated.row(k));
        }
        for row in self.layout.alpha() {
            for j in 0..next.m() {
                if next.members[(row, j)] < 0.0 {
                    next.members[(row, j)] = 0.0;
                }
            }
        }
        next.refresh_observations();
        Ok(next)
    }

    /// Scale the analysed state anomalies about their mean.
    pub fn inflate(&self, factor: f64) -> Result<AugmentedEnsemble, DaError> {
        if !(factor >= 1.0) {
            return Err(DaError::InflationFactor(factor));
        }
        let mut next = self.clone();
        if factor == 1.0 {
            return Ok(next);
        }
        let mean = member_mean(&self.members);
        for row in self.layout.state_rows(self.scenario) {
            for j in 0..self.m() {
                next.members[(row, j)] = mean[row] + factor * (self.members[(row, j)] - mean[row]);
            }
        }
        for row in self.layout.alpha() {
            for j in 0..next.m() {
                next.members[(row, j)] = next.members[(row, j)].max(0.0);
            }
        }
        next.refresh_observations();
        Ok(next)
    }
}

/// Draw an initial ensemble around the last row of `history`.
///
/// Each member sees `history` perturbed by its own coefficient noise, is
/// washed out through the reservoir to obtain `r`, and then receives extra
/// reservoir noise. Singular values are drawn about the trained ones and
/// truncated at zero. Member `j` uses RNG stream `j` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn init_ensemble(
    scenario: Scenario,
    model: &EsnModel,
    operator: MeasurementOperator,
    history: &DMatrix<f64>,
    spreads: &Spreads,
    m: usize,
    seed: u64,
) -> Result<AugmentedEnsemble, DaError> {
    if m < 2 {
        return Err(DaError::TooFewMembers(m));
    }
    if spreads.phi < 0.0 || spreads.r < 0.0 || spreads.alpha_rel < 0.0 {
        return Err(DaError::InvalidInput("spreads must be nonnegative".into()));
    }
    if history.nrows() == 0 || history.ncols() != model.n_inputs() {
        return Err(DaError::InvalidInput(format!(
            "history of shape {:?} for a model with {} inputs",
            history.shape(),
            model.n_inputs()
        )));
    }
    let nm = model.n_inputs();
    let nr = model.n_reservoir();
    let phi0 = history.row(history.nrows() - 1).transpose();
    let trained_alpha = model.factorize_output().alpha;
    let mut phis = DMatrix::zeros(nm, m);
    let mut rs = DMatrix::zeros(nr, m);
    let mut alphas = DMatrix::zeros(nm, m);
    for j in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let perturbed = history.map(|v| v + spreads.phi * normal());
        let state = model.warm_up(&perturbed)?;
        let r = state.r.map(|v| v + spreads.r * normal());
        let phi = phi0.map(|v| v + spreads.phi * normal());
        let alpha = trained_alpha.map(|a| (a * (1.0 + spreads.alpha_rel * normal())).max(0.0));
        phis.set_column(j, &phi);
        rs.set_column(j, &r);
        alphas.set_column(j, &alpha);
    }
    AugmentedEnsemble::from_parts(scenario, operator, &phis, &rs, scenario.updates_parameters().then_some(&alphas))
}
