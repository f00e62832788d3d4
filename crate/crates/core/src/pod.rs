//! Snapshot proper orthogonal decomposition and QR-pivoted sensor placement.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::field::{Component, Grid, SnapshotSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PodError {
    #[error("n_modes = {requested} is out of range 1..={max}")]
    ModesOutOfRange { requested: usize, max: usize },
    #[error("at least two snapshots are needed, got {0}")]
    TooFewSnapshots(usize),
    #[error("retained singular value {index} is zero; the basis cannot be inverted")]
    SingularBasis { index: usize },
    #[error("vector of length {got} does not match the basis ({expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("n_sensors = {requested} is out of range 1..={max}")]
    SensorsOutOfRange { requested: usize, max: usize },
}

/// Truncated POD of a snapshot set.
///
/// `modes` holds the spatial modes as columns over the stacked `[ux; uy]`
/// vector. Coefficients are normalised by the singular values, so a snapshot
/// is `mean_field + modes * diag(singular_values) * φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    pub grid: Grid,
    pub modes: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub temporal_coeffs: DMatrix<f64>,
    pub mean_field: DVector<f64>,
    pub energy_fraction: f64,
}

/// Full singular spectrum of the mean-subtracted snapshot matrix, sorted
/// nonincreasing.
pub fn singular_spectrum(data: &SnapshotSet) -> Vec<f64> {
    let (x, _) = centred(data);
    let mut s: Vec<f64> = x.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn centred(data: &SnapshotSet) -> (DMatrix<f64>, DVector<f64>) {
    let mut x = data.stacked_rows(0..data.nt());
    let mean = x.row_mean().transpose();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    (x, mean)
}

pub fn compute_pod(data: &SnapshotSet, n_modes: usize) -> Result<PodBasis, PodError> {
    let nt = data.nt();
    if nt < 2 {
        return Err(PodError::TooFewSnapshots(nt));
    }
    let max = nt.min(2 * data.grid.n_points());
    if n_modes == 0 || n_modes > max {
        return Err(PodError::ModesOutOfRange { requested: n_modes, max });
    }
    let (x, mean) = centred(data);
    let dim = x.ncols();
    let svd = x.svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();

    let mut modes = DMatrix::zeros(dim, n_modes);
    let mut coeffs = DMatrix::zeros(nt, n_modes);
    let mut sigma = DVector::zeros(n_modes);
    for (col, &src) in order.iter().take(n_modes).enumerate() {
        let mode = v_t.row(src).transpose();
        let mut pivot = 0;
        for i in 1..dim {
            if mode[i].abs() > mode[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if mode[pivot] < 0.0 { -1.0 } else { 1.0 };
        modes.set_column(col, &(mode * sign));
        coeffs.set_column(col, &(u.column(src) * sign));
        sigma[col] = svd.singular_values[src];
    }
    let retained: f64 = sigma.iter().map(|s| s * s).sum();
    let energy_fraction = if total > 0.0 { retained / total } else { 1.0 };

    Ok(PodBasis {
        grid: data.grid,
        modes,
        singular_values: sigma,
        temporal_coeffs: coeffs,
        mean_field: mean,
        energy_fraction,
    })
}

impl PodBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    /// Length of a stacked field vector.
    pub fn field_len(&self) -> usize {
        self.modes.nrows()
    }

    pub fn project(&self, snapshot: &DVector<f64>) -> Result<DVector<f64>, PodError> {
        if snapshot.len() != self.field_len() {
            return Err(PodError::LengthMismatch {
                expected: self.field_len(),
                got: snapshot.len(),
            });
        }
        // relative floor well above SVD round-off on exactly rank-deficient data
        let floor = self.singular_values.get(0).copied().unwrap_or(0.0) * 1e-12;
        if let Some(index) = self.singular_values.iter().position(|s| !(*s > floor)) {
            return Err(PodError::SingularBasis { index });
        }
        let mut phi = self.modes.tr_mul(&(snapshot - &self.mean_field));
        phi.component_div_assign(&self.singular_values);
        Ok(phi)
    }

    pub fn reconstruct(&self, phi: &DVector<f64>) -> DVector<f64> {
        assert_eq!(phi.len(), self.n_modes(), "coefficient length");
        let scaled = phi.component_mul(&self.singular_values);
        &self.mean_field + &self.modes * scaled
    }

    /// Project every snapshot of a set; one coefficient vector per row.
    pub fn project_all(&self, data: &SnapshotSet) -> Result<DMatrix<f64>, PodError> {
        let mut out = DMatrix::zeros(data.nt(), self.n_modes());
        for k in 0..data.nt() {
            let phi = self.project(&data.stacked(k))?;
            out.set_row(k, &phi.transpose());
        }
        Ok(out)
    }

    /// Temporal coefficients as `t,phi1..phiN` CSV with `t` the row index.
    pub fn coeffs_csv(&self) -> String {
        coefficients_csv(&self.temporal_coeffs, 0)
    }

    /// Column-pivoted QR on `modesᵀ`. Pivots are taken in order; a pivot that
    /// lands on an already selected grid point (through its other velocity
    /// component) is skipped. Once the residual is exhausted the remaining
    /// sensors go to the points with the largest mode-row norm.
    pub fn select_sensors(&self, n_sensors: usize) -> Result<SensorSet, PodError> {
        let npts = self.grid.n_points();
        if n_sensors == 0 || n_sensors > npts {
            return Err(PodError::SensorsOutOfRange { requested: n_sensors, max: npts });
        }
        let dim = self.field_len();
        let rank = self.n_modes();
        let mut residual = self.modes.transpose();
        let mut norms: Vec<f64> = (0..dim).map(|c| residual.column(c).norm_squared()).collect();
        let initial = norms.iter().cloned().fold(0.0, f64::max);
        let mut taken = vec![false; npts];
        let mut indices = Vec::with_capacity(n_sensors);
        let mut components = Vec::with_capacity(n_sensors);

        for _ in 0..rank.min(n_sensors) {
            let mut best: Option<usize> = None;
            for c in 0..dim {
                if taken[c % npts] {
                    continue;
                }
                if best.map_or(true, |b| norms[c] > norms[b]) {
                    best = Some(c);
                }
            }
            let Some(c) = best else { break };
            if !(norms[c] > 1e-24 * initial) {
                break;
            }
            let q = residual.column(c) / norms[c].sqrt();
            for j in 0..dim {
                let proj = q.dot(&residual.column(j));
                residual.column_mut(j).axpy(-proj, &q, 1.0);
                norms[j] = residual.column(j).norm_squared();
            }
            taken[c % npts] = true;
            indices.push(c % npts);
            components.push(if c < npts { Component::Ux } else { Component::Uy });
        }

        if indices.len() < n_sensors {
            let leverage = |p: usize| {
                let a = self.modes.row(p).norm_squared();
                let b = self.modes.row(npts + p).norm_squared();
                if a >= b {
                    (a, Component::Ux)
                } else {
                    (b, Component::Uy)
                }
            };
            let mut rest: Vec<usize> = (0..npts).filter(|p| !taken[*p]).collect();
            rest.sort_by(|&a, &b| leverage(b).0.total_cmp(&leverage(a).0).then(a.cmp(&b)));
            for p in rest.into_iter().take(n_sensors - indices.len()) {
                indices.push(p);
                components.push(leverage(p).1);
            }
        }

        let coordinates = indices.iter().map(|&p| self.grid.coordinates(p)).collect();
        Ok(SensorSet {
            indices,
            components,
            coordinates,
        })
    }

    /// Reconstructed velocity at the sensors, `[ux(x_q); uy(x_q)]`.
    pub fn measure_at_sensors(&self, phi: &DVector<f64>, sensors: &SensorSet) -> DVector<f64> {
        SensorProbe::new(self, sensors).measure(phi)
    }
}

/// `t,phi1..phiN` CSV of a coefficient trajectory, one row per time step.
pub fn coefficients_csv(coeffs: &DMatrix<f64>, t0: usize) -> String {
    let mut out = String::from("t");
    for i in 0..coeffs.ncols() {
        out.push_str(&format!(",phi{}", i + 1));
    }
    out.push('\n');
    for (k, row) in coeffs.row_iter().enumerate() {
        out.push_str(&(t0 + k).to_string());
        for v in row.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Sensor locations, numbered by pivot order. `components` records which
/// velocity component produced each pivot; measurements read both.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSet {
    pub indices: Vec<usize>,
    pub components: Vec<Component>,
    pub coordinates: Vec<(f64, f64)>,
}

impl SensorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Every grid point, in index order.
    pub fn full_grid(grid: &Grid) -> Self {
        let indices: Vec<usize> = (0..grid.n_points()).collect();
        Self {
            coordinates: indices.iter().map(|&p| grid.coordinates(p)).collect(),
            components: vec![Component::Ux; indices.len()],
            indices,
        }
    }

    /// Stacked-vector rows read by the sensors, all `ux` first.
    pub fn rows(&self, n_points: usize) -> Vec<usize> {
        self.indices
            .iter()
            .copied()
            .chain(self.indices.iter().map(|p| p + n_points))
            .collect()
    }

    /// Sample a stacked field at the sensors.
    pub fn sample(&self, field: &DVector<f64>, n_points: usize) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.len(),
            self.rows(n_points).into_iter().map(|r| field[r]),
        )
    }
}

/// Affine sensor map `φ ↦ offset + gain φ` precomputed from a basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorProbe {
    pub offset: DVector<f64>,
    pub gain: DMatrix<f64>,
}

impl SensorProbe {
    pub fn new(basis: &PodBasis, sensors: &SensorSet) -> Self {
        let rows = sensors.rows(basis.grid.n_points());
        let nm = basis.n_modes();
        let mut gain = DMatrix::zeros(rows.len(), nm);
        let mut offset = DVector::zeros(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            offset[i] = basis.mean_field[r];
            for j in 0..nm {
                gain[(i, j)] = basis.modes[(r, j)] * basis.singular_values[j];
            }
        }
        Self { offset, gain }
    }

    pub fn measure(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.gain * phi
    }

    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }
}
