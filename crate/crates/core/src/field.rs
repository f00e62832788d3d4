//! Velocity snapshot data on a uniform rectangular grid, the analytic wake
//! surrogate used as ground truth, and the spatially convolved noise model.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> FieldError {
    FieldError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Uniform grid with `nx * ny` points, stored row-major in `(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, dt: f64) -> Result<Self, FieldError> {
        let grid = Self { nx, ny, dx, dy, dt };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.nx < 2 {
            return Err(invalid("nx", format!("{} < 2", self.nx)));
        }
        if self.ny < 2 {
            return Err(invalid("ny", format!("{} < 2", self.ny)));
        }
        for (name, v) in [("dx", self.dx), ("dy", self.dy), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("{v} is not a positive spacing")));
            }
        }
        Ok(())
    }

    /// Number of grid points per velocity component.
    pub fn n_points(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Physical coordinates of a grid point. `y` is centred on the domain
    /// midline.
    pub fn coordinates(&self, index: usize) -> (f64, f64) {
        let ix = index % self.nx;
        let iy = index / self.nx;
        let x = ix as f64 * self.dx;
        let y = (iy as f64 - 0.5 * (self.ny - 1) as f64) * self.dy;
        (x, y)
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 32,
            dx: 0.125,
            dy: 0.125,
            dt: 0.1,
        }
    }
}

/// Two velocity components over `nt` time steps. Each row of `ux`/`uy` is one
/// snapshot of `nx * ny` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub grid: Grid,
    pub ux: DMatrix<f64>,
    pub uy: DMatrix<f64>,
    pub times: Vec<f64>,
}

impl SnapshotSet {
    pub fn new(
        grid: Grid,
        ux: DMatrix<f64>,
        uy: DMatrix<f64>,
        times: Vec<f64>,
    ) -> Result<Self, FieldError> {
        let set = Self { grid, ux, uy, times };
        set.validate()?;
        Ok(set)
    }

    /// Snapshots at `t0, t0 + dt, ...`.
    pub fn uniform(grid: Grid, ux: DMatrix<f64>, uy: DMatrix<f64>, t0: f64) -> Result<Self, FieldError> {
        let times = (0..ux.nrows()).map(|k| t0 + k as f64 * grid.dt).collect();
        Self::new(grid, ux, uy, times)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        self.grid.validate()?;
        let npts = self.grid.n_points();
        if self.ux.shape() != self.uy.shape() {
            return Err(invalid(
                "uy",
                format!("shape {:?} differs from ux {:?}", self.uy.shape(), self.ux.shape()),
            ));
        }
        if self.ux.ncols() != npts {
            return Err(invalid(
                "ux",
                format!("{} columns for a grid of {npts} points", self.ux.ncols()),
            ));
        }
        if self.times.len() != self.ux.nrows() {
            return Err(invalid(
                "times",
                format!("{} stamps for {} snapshots", self.times.len(), self.ux.nrows()),
            ));
        }
        for w in self.times.windows(2) {
            let step = w[1] - w[0];
            if !(step > 0.0) || ((step - self.grid.dt) / self.grid.dt).abs() > 1e-12 {
                return Err(invalid(
                    "times",
                    format!("spacing {step} is not the grid step {}", self.grid.dt),
                ));
            }
        }
        Ok(())
    }

    pub fn nt(&self) -> usize {
        self.ux.nrows()
    }

    /// Snapshot `k` as a stacked `[ux; uy]` vector of length `2 * nx * ny`.
    pub fn stacked(&self, k: usize) -> DVector<f64> {
        let npts = self.grid.n_points();
        let mut v = DVector::zeros(2 * npts);
        for p in 0..npts {
            v[p] = self.ux[(k, p)];
            v[npts + p] = self.uy[(k, p)];
        }
        v
    }

    /// Snapshots `range` as a matrix with one stacked snapshot per row.
    pub fn stacked_rows(&self, range: std::ops::Range<usize>) -> DMatrix<f64> {
        let npts = self.grid.n_points();
        let mut m = DMatrix::zeros(range.len(), 2 * npts);
        for (row, k) in range.enumerate() {
            for p in 0..npts {
                m[(row, p)] = self.ux[(k, p)];
                m[(row, npts + p)] = self.uy[(k, p)];
            }
        }
        m
    }

    /// Copy of the snapshots in `range`, keeping their time stamps.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SnapshotSet {
        let n = range.len();
        let npts = self.grid.n_points();
        SnapshotSet {
            grid: self.grid,
            ux: self.ux.view((range.start, 0), (n, npts)).into_owned(),
            uy: self.uy.view((range.start, 0), (n, npts)).into_owned(),
            times: self.times[range].to_vec(),
        }
    }

    /// Build a one-snapshot set from a stacked `[ux; uy]` vector.
    pub fn from_stacked(grid: Grid, fields: &[DVector<f64>], t0: f64) -> Result<Self, FieldError> {
        let npts = grid.n_points();
        let mut ux = DMatrix::zeros(fields.len(), npts);
        let mut uy = DMatrix::zeros(fields.len(), npts);
        for (k, f) in fields.iter().enumerate() {
            if f.len() != 2 * npts {
                return Err(invalid("fields", format!("length {} != {}", f.len(), 2 * npts)));
            }
            for p in 0..npts {
                ux[(k, p)] = f[p];
                uy[(k, p)] = f[npts + p];
            }
        }
        Self::uniform(grid, ux, uy, t0)
    }
}

/// Velocity component selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Ux,
    Uy,
}

/// Write one component of one snapshot as `x,y,value` CSV.
pub fn field_csv(data: &SnapshotSet, k: usize, component: Component) -> String {
    let src = match component {
        Component::Ux => &data.ux,
        Component::Uy => &data.uy,
    };
    let mut out = String::from("x,y,value\n");
    for p in 0..data.grid.n_points() {
        let (x, y) = data.grid.coordinates(p);
        out.push_str(&format!("{x},{y},{}\n", src[(k, p)]));
    }
    out
}

/// Uniform mean flow with a Gaussian velocity deficit behind the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFlow {
    pub free_stream: f64,
    pub deficit: f64,
}

impl Default for MeanFlow {
    fn default() -> Self {
        Self {
            free_stream: 1.0,
            deficit: 0.6,
        }
    }
}

/// Parameters of the analytic wake surrogate.
///
/// Each harmonic pair `p = 1..=n_pairs` is a travelling wave with angular
/// frequency `p * 2π / base_period` (in steps). Amplitudes are the RMS
/// fluctuation contributed per grid value, so the fluctuation energy of a
/// snapshot does not depend on the grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWakeSpec {
    pub grid: Grid,
    pub nt: usize,
    pub n_pairs: usize,
    pub base_period: f64,
    pub amplitudes: Vec<f64>,
    pub mean_flow: MeanFlow,
    pub seed: u64,
}

impl Default for SyntheticWakeSpec {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            nt: 250,
            n_pairs: 2,
            base_period: 250.0 / 6.0,
            amplitudes: vec![0.5, 0.2],
            mean_flow: MeanFlow::default(),
            seed: 0,
        }
    }
}

impl SyntheticWakeSpec {
    pub fn validate(&self) -> Result<(), FieldError> {
        self.grid.validate()?;
        if self.nt < 1 {
            return Err(invalid("nt", "at least one snapshot is required"));
        }
        if self.n_pairs < 1 {
            return Err(invalid("n_pairs", "at least one harmonic pair is required"));
        }
        if !(self.base_period > 4.0) {
            return Err(invalid("base_period", format!("{} must exceed 4 steps", self.base_period)));
        }
        if self.amplitudes.len() != self.n_pairs {
            return Err(invalid(
                "amplitudes",
                format!("{} values for {} pairs", self.amplitudes.len(), self.n_pairs),
            ));
        }
        if self.amplitudes.iter().any(|a| !(*a >= 0.0)) {
            return Err(invalid("amplitudes", "values must be nonnegative"));
        }
        if self.amplitudes.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(invalid("amplitudes", "values must be strictly decreasing"));
        }
        if 4 * self.n_pairs > 2 * self.grid.n_points() {
            return Err(invalid("n_pairs", "more modes than grid values"));
        }
        Ok(())
    }

    pub fn fluctuation_modes(&self) -> Vec<DVector<f64>> {
        wake_modes(&self.grid, self.n_pairs, &self.pair_phases())
    }

    fn pair_phases(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        (0..self.n_pairs).map(|_| phase.sample(&mut rng)).collect()
    }

    pub fn mean_field(&self) -> DVector<f64> {
        let g = &self.grid;
        let npts = g.n_points();
        let width = 0.15 * g.ny as f64 * g.dy;
        let length = g.nx as f64 * g.dx;
        let mut mean = DVector::zeros(2 * npts);
        for p in 0..npts {
            let (x, y) = g.coordinates(p);
            let recovery = (-x / length).exp();
            mean[p] = self.mean_flow.free_stream
                - self.mean_flow.deficit * recovery * (-(y / width).powi(2)).exp();
        }
        mean
    }
}

/// Orthonormal spatial modes, two per harmonic pair, stacked `[ux; uy]`.
fn wake_modes(grid: &Grid, n_pairs: usize, phases: &[f64]) -> Vec<DVector<f64>> {
    let npts = grid.n_points();
    let lx = grid.nx as f64 * grid.dx;
    let width = 0.15 * grid.ny as f64 * grid.dy;
    let wavelength = 0.5 * lx;
    let mut raw = Vec::with_capacity(2 * n_pairs);
    for pair in 0..n_pairs {
        let harmonic = (pair + 1) as f64;
        let k = harmonic * 2.0 * PI / wavelength;
        let mut cos_mode = DVector::zeros(2 * npts);
        let mut sin_mode = DVector::zeros(2 * npts);
        for p in 0..npts {
            let (x, y) = grid.coordinates(p);
            let eta = y / width;
            let envelope = (-eta * eta).exp() * (1.0 - (-3.0 * x / lx).exp());
            // odd harmonics: antisymmetric ux, symmetric uy; even: the reverse
            let (fx, fy) = if pair % 2 == 0 { (eta, 1.0) } else { (1.0, eta) };
            let arg = k * x + phases[pair];
            cos_mode[p] = envelope * fx * arg.cos();
            cos_mode[npts + p] = envelope * fy * arg.cos();
            sin_mode[p] = envelope * fx * arg.sin();
            sin_mode[npts + p] = envelope * fy * arg.sin();
        }
        raw.push(cos_mode);
        raw.push(sin_mode);
    }
    // two passes of modified Gram-Schmidt
    for _ in 0..2 {
        for i in 0..raw.len() {
            for j in 0..i {
                let proj = raw[j].dot(&raw[i]);
                let basis = raw[j].clone();
                raw[i].axpy(-proj, &basis, 1.0);
            }
            let norm = raw[i].norm();
            raw[i] /= norm;
        }
    }
    raw
}

/// Analytic low-rank wake: `u(t) = mean + Σ_p c_p (cos(ω_p t) ψ_p,c + sin(ω_p t) ψ_p,s)`.
pub fn generate_synthetic_wake(spec: &SyntheticWakeSpec) -> Result<SnapshotSet, FieldError> {
    spec.validate()?;
    let grid = spec.grid;
    let npts = grid.n_points();
    let mean = spec.mean_field();
    let modes = spec.fluctuation_modes();
    let scale = (2.0 * npts as f64).sqrt();
    let mut ux = DMatrix::zeros(spec.nt, npts);
    let mut uy = DMatrix::zeros(spec.nt, npts);
    for k in 0..spec.nt {
        let mut u = mean.clone();
        for pair in 0..spec.n_pairs {
            let omega = (pair + 1) as f64 * 2.0 * PI / spec.base_period;
            let theta = omega * k as f64;
            let c = spec.amplitudes[pair] * scale;
            u.axpy(c * theta.cos(), &modes[2 * pair], 1.0);
            u.axpy(c * theta.sin(), &modes[2 * pair + 1], 1.0);
        }
        for p in 0..npts {
            ux[(k, p)] = u[p];
            uy[(k, p)] = u[npts + p];
        }
    }
    SnapshotSet::uniform(grid, ux, uy, 0.0)
}

/// White noise `ε ~ N(0, eps_std²)` convolved with a normalised Gaussian
/// kernel of width `kernel_std` grid cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub eps_std: f64,
    pub kernel_std: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            eps_std: 0.1,
            kernel_std: 0.1,
            seed: 1,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.eps_std >= 0.0 && self.eps_std.is_finite()) {
            return Err(invalid("eps_std", format!("{} must be nonnegative", self.eps_std)));
        }
        if !(self.kernel_std >= 0.0 && self.kernel_std.is_finite()) {
            return Err(invalid("kernel_std", format!("{} must be nonnegative", self.kernel_std)));
        }
        Ok(())
    }

    /// Half-width of the square stencil, `⌈3·kernel_std⌉`.
    pub fn half_width(&self) -> usize {
        (3.0 * self.kernel_std).ceil() as usize
    }

    /// Normalised `(2h+1)²` stencil, row-major in `(dy, dx)`.
    pub fn kernel(&self) -> Vec<f64> {
        let h = self.half_width() as isize;
        let side = (2 * h + 1) as usize;
        if h == 0 {
            return vec![1.0];
        }
        let s2 = 2.0 * self.kernel_std * self.kernel_std;
        let mut w = Vec::with_capacity(side * side);
        for dy in -h..=h {
            for dx in -h..=h {
                w.push((-((dx * dx + dy * dy) as f64) / s2).exp());
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }

    /// Noise field for one snapshot. The RNG stream is keyed by the time
    /// index so snapshots can be drawn in any order.
    pub fn sample(&self, grid: &Grid, time_index: usize) -> (Vec<f64>, Vec<f64>) {
        let npts = grid.n_points();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(time_index as u64);
        let white = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..npts)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    self.eps_std * z
                })
                .collect()
        };
        let ex = white(&mut rng);
        let ey = white(&mut rng);
        (self.convolve(grid, &ex), self.convolve(grid, &ey))
    }

    /// Convolve a single-component field with the kernel, reflecting at the
    /// boundary (`-1 → 0`, `n → n-1`).
    pub fn convolve(&self, grid: &Grid, field: &[f64]) -> Vec<f64> {
        let h = self.half_width() as isize;
        if h == 0 {
            return field.to_vec();
        }
        let kernel = self.kernel();
        let side = (2 * h + 1) as usize;
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 {
                -i - 1
            } else if i >= n {
                2 * n - i - 1
            } else {
                i
            };
            r as usize
        };
        let mut out = vec![0.0; field.len()];
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let mut acc = 0.0;
                for (a, dy) in (-h..=h).enumerate() {
                    let sy = reflect(iy as isize + dy, grid.ny);
                    for (b, dx) in (-h..=h).enumerate() {
                        let sx = reflect(ix as isize + dx, grid.nx);
                        acc += kernel[a * side + b] * field[grid.index(sx, sy)];
                    }
                }
                out[grid.index(ix, iy)] = acc;
            }
        }
        out
    }
}

/// Perturb every snapshot with independent convolved noise.
pub fn add_convolved_noise(data: &SnapshotSet, noise: &NoiseModel) -> Result<SnapshotSet, FieldError> {
    noise.validate()?;
    if noise.eps_std == 0.0 {
        return Ok(data.clone());
    }
    let h = noise.half_width();
    if h >= data.grid.nx || h >= data.grid.ny {
        return Err(invalid(
            "kernel_std",
            format!("stencil half-width {h} does not fit a {}x{} grid", data.grid.nx, data.grid.ny),
        ));
    }
    let grid = data.grid;
    let draw = |k: usize| noise.sample(&grid, k);
    #[cfg(feature = "parallel")]
    let fields: Vec<(Vec<f64>, Vec<f64>)> = {
        use rayon::prelude::*;
        (0..data.nt()).into_par_iter().map(draw).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let fields: Vec<(Vec<f64>, Vec<f64>)> = (0..data.nt()).map(draw).collect();

    let mut out = data.clone();
    for (k, (ex, ey)) in fields.into_iter().enumerate() {
        for p in 0..grid.n_points() {
            out.ux[(k, p)] += ex[p];
            out.uy[(k, p)] += ey[p];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticWakeSpec {
        SyntheticWakeSpec {
            grid: Grid::new(16, 12, 0.25, 0.25, 0.1).unwrap(),
            nt: 80,
            n_pairs: 1,
            base_period: 40.0,
            amplitudes: vec![0.5],
            mean_flow: MeanFlow::default(),
            seed: 3,
        }
    }

    #[test]
    fn grid_rejects_degenerate_sizes() {
        assert!(matches!(Grid::new(1, 4, 1.0, 1.0, 1.0), Err(FieldError::Invalid { field: "nx", .. })));
        assert!(matches!(Grid::new(4, 4, 1.0, 0.0, 1.0), Err(FieldError::Invalid { field: "dy", .. })));
    }

    #[test]
    fn wake_modes_are_orthonormal() {
        let spec = SyntheticWakeSpec {
            n_pairs: 3,
            amplitudes: vec![0.5, 0.2, 0.1],
            ..small_spec()
        };
        let modes = spec.fluctuation_modes();
        for i in 0..modes.len() {
            for j in 0..modes.len() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((modes[i].dot(&modes[j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_amplitude_gives_mean_flow() {
        let spec = SyntheticWakeSpec {
            amplitudes: vec![0.0],
            ..small_spec()
        };
        let data = generate_synthetic_wake(&spec).unwrap();
        let mean = spec.mean_field();
        for k in 0..data.nt() {
            assert_eq!(data.stacked(k), mean);
        }
    }

    #[test]
    fn rank_two_for_single_pair() {
        let data = generate_synthetic_wake(&small_spec()).unwrap();
        let mean = small_spec().mean_field();
        let mut x = data.stacked_rows(0..data.nt());
        for mut row in x.row_iter_mut() {
            row -= mean.transpose();
        }
        let sv = x.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(s[1] > 1e-3 * s[0]);
        assert!(s[2..].iter().all(|v| *v < 1e-10 * s[0]));
    }

    #[test]
    fn spec_validation_names_field() {
        let bad = SyntheticWakeSpec {
            n_pairs: 2,
            amplitudes: vec![0.2, 0.3],
            ..small_spec()
        };
        assert!(matches!(bad.validate(), Err(FieldError::Invalid { field: "amplitudes", .. })));
        let bad = SyntheticWakeSpec {
            base_period: 4.0,
            ..small_spec()
        };
        assert!(matches!(bad.validate(), Err(FieldError::Invalid { field: "base_period", .. })));
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_wake(&small_spec()).unwrap();
        let b = generate_synthetic_wake(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_is_identity() {
        let data = generate_synthetic_wake(&small_spec()).unwrap();
        let noisy = add_convolved_noise(
            &data,
            &NoiseModel {
                eps_std: 0.0,
                kernel_std: 2.0,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(noisy, data);
    }

    #[test]
    fn kernel_sums_to_one() {
        for s in [0.1, 0.5, 1.0, 2.3] {
            let n = NoiseModel {
                eps_std: 0.1,
                kernel_std: s,
                seed: 0,
            };
            let total: f64 = n.kernel().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert_eq!(n.kernel().len(), (2 * n.half_width() + 1).pow(2));
        }
    }

    #[test]
    fn convolution_preserves_constants() {
        let grid = Grid::new(9, 7, 1.0, 1.0, 1.0).unwrap();
        let n = NoiseModel {
            eps_std: 0.1,
            kernel_std: 1.2,
            seed: 0,
        };
        let out = n.convolve(&grid, &vec![2.5; grid.n_points()]);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn noise_is_deterministic_and_leaves_input() {
        let data = generate_synthetic_wake(&small_spec()).unwrap();
        let copy = data.clone();
        let n = NoiseModel::default();
        let a = add_convolved_noise(&data, &n).unwrap();
        let b = add_convolved_noise(&data, &n).unwrap();
        assert_eq!(a, b);
        assert_eq!(data, copy);
        assert_ne!(a, data);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let data = generate_synthetic_wake(&small_spec()).unwrap();
        let n = NoiseModel {
            eps_std: 0.1,
            kernel_std: 5.0,
            seed: 0,
        };
        assert!(add_convolved_noise(&data, &n).is_err());
    }

    #[test]
    fn times_must_be_uniform() {
        let grid = Grid::new(2, 2, 1.0, 1.0, 0.5).unwrap();
        let z = DMatrix::zeros(3, 4);
        assert!(SnapshotSet::new(grid, z.clone(), z.clone(), vec![0.0, 0.5, 1.2]).is_err());
        assert!(SnapshotSet::new(grid, z.clone(), z, vec![0.0, 0.5, 1.0]).is_ok());
    }
}
