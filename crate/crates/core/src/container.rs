//! Little-endian binary container for snapshots, POD bases and ESN models.
//!
//! ```text
//! "RCAS" | version u32 = 1 | nx u32 | ny u32 | nt u32 | n_fields u32 = 2
//! dx f64 | dy f64 | dt f64
//! nt * 2 * nx * ny f64      time-major, ux then uy, row-major in (y, x)
//! sections*                 tag [u8; 4] | body length u64 | body
//! ```
//!
//! Sections are `PODB` (POD basis) and `ESNM` (echo state network). Snapshot
//! time stamps are not stored; they are rebuilt as `k * dt`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::esn::{EsnConfig, EsnModel};
use crate::field::{Grid, SnapshotSet};
use crate::pod::PodBasis;

pub const MAGIC: &[u8; 4] = b"RCAS";
pub const VERSION: u32 = 1;
pub const POD_TAG: &[u8; 4] = b"PODB";
pub const ESN_TAG: &[u8; 4] = b"ESNM";
const HEADER_LEN: usize = 48;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("truncated payload at byte offset {offset}: needed {needed} bytes, {available} available")]
    TruncatedPayload {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown section {tag:?} at byte offset {offset}")]
    UnknownSection { tag: String, offset: usize },
}

/// Contents of a container file. `snapshots` may hold zero time steps when
/// the file only carries a basis or a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub snapshots: SnapshotSet,
    pub pod: Option<PodBasis>,
    pub esn: Option<EsnModel>,
}

impl Container {
    pub fn from_snapshots(snapshots: SnapshotSet) -> Self {
        Self {
            snapshots,
            pod: None,
            esn: None,
        }
    }

    /// Header-only container carrying the grid.
    pub fn empty(grid: Grid) -> Self {
        let npts = grid.n_points();
        Self::from_snapshots(SnapshotSet {
            grid,
            ux: DMatrix::zeros(0, npts),
            uy: DMatrix::zeros(0, npts),
            times: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.snapshots;
        let g = &s.grid;
        let npts = g.n_points();
        let mut w = Writer(Vec::with_capacity(HEADER_LEN + 16 * s.nt() * npts));
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(g.nx as u32);
        w.u32(g.ny as u32);
        w.u32(s.nt() as u32);
        w.u32(2);
        w.f64(g.dx);
        w.f64(g.dy);
        w.f64(g.dt);
        for k in 0..s.nt() {
            for p in 0..npts {
                w.f64(s.ux[(k, p)]);
            }
            for p in 0..npts {
                w.f64(s.uy[(k, p)]);
            }
        }
        if let Some(pod) = &self.pod {
            w.section(POD_TAG, &encode_pod(pod));
        }
        if let Some(esn) = &self.esn {
            w.section(ESN_TAG, &encode_esn(esn));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ContainerError::MalformedHeader("missing RCAS magic".into()));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(ContainerError::MalformedHeader(format!("unsupported version {version}")));
        }
        let nx = r.u32()? as usize;
        let ny = r.u32()? as usize;
        let nt = r.u32()? as usize;
        let n_fields = r.u32()?;
        if n_fields != 2 {
            return Err(ContainerError::DimensionMismatch(format!("{n_fields} fields, expected 2")));
        }
        let dx = r.f64()?;
        let dy = r.f64()?;
        let dt = r.f64()?;
        let grid = Grid::new(nx, ny, dx, dy, dt).map_err(|e| ContainerError::DimensionMismatch(e.to_string()))?;
        let npts = grid.n_points();
        let values = nt
            .checked_mul(2 * npts)
            .ok_or_else(|| ContainerError::DimensionMismatch("payload size overflows".into()))?;
        r.ensure(values.checked_mul(8).unwrap_or(usize::MAX))?;
        let mut ux = DMatrix::zeros(nt, npts);
        let mut uy = DMatrix::zeros(nt, npts);
        for k in 0..nt {
            for p in 0..npts {
                ux[(k, p)] = r.f64()?;
            }
            for p in 0..npts {
                uy[(k, p)] = r.f64()?;
            }
        }
        let times = (0..nt).map(|k| k as f64 * dt).collect();
        let snapshots = SnapshotSet { grid, ux, uy, times };

        let mut pod = None;
        let mut esn = None;
        while r.pos < bytes.len() {
            let offset = r.pos;
            let tag: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
            let len = r.u64()? as usize;
            let body = r.take(len)?;
            let mut sub = Reader { bytes: body, pos: 0 };
            match &tag {
                t if t == POD_TAG => pod = Some(decode_pod(&mut sub, grid).map_err(|e| e.shift(offset + 12))?),
                t if t == ESN_TAG => esn = Some(decode_esn(&mut sub).map_err(|e| e.shift(offset + 12))?),
                _ => {
                    return Err(ContainerError::UnknownSection {
                        tag: String::from_utf8_lossy(&tag).into_owned(),
                        offset,
                    })
                }
            }
            if sub.pos != body.len() {
                return Err(ContainerError::DimensionMismatch(format!(
                    "section at offset {offset} has {} trailing bytes",
                    body.len() - sub.pos
                )));
            }
        }
        Ok(Self { snapshots, pod, esn })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn write_snapshots(data: &SnapshotSet, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    Container::from_snapshots(data.clone()).write(path)
}

pub fn read_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet, ContainerError> {
    Ok(Container::read(path)?.snapshots)
}

impl ContainerError {
    fn shift(self, base: usize) -> Self {
        match self {
            ContainerError::TruncatedPayload {
                offset,
                needed,
                available,
            } => ContainerError::TruncatedPayload {
                offset: offset + base,
                needed,
                available,
            },
            other => other,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: &[u8]) {
        self.0.extend_from_slice(tag);
        self.u64(body.len() as u64);
        self.0.extend_from_slice(body);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn ensure(&self, n: usize) -> Result<(), ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::TruncatedPayload {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        Ok(())
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        self.ensure(n)?;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
        self.ensure(n.checked_mul(8).unwrap_or(usize::MAX))?;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn encode_pod(pod: &PodBasis) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(pod.n_modes() as u32);
    w.u32(pod.temporal_coeffs.nrows() as u32);
    w.f64(pod.energy_fraction);
    w.f64s(pod.singular_values.iter());
    w.f64s(pod.mean_field.iter());
    // column-major: one mode after another
    w.f64s(pod.modes.iter());
    for k in 0..pod.temporal_coeffs.nrows() {
        w.f64s(pod.temporal_coeffs.row(k).iter());
    }
    w.0
}

fn decode_pod(r: &mut Reader, grid: Grid) -> Result<PodBasis, ContainerError> {
    let nm = r.u32()? as usize;
    let n_train = r.u32()? as usize;
    let dim = 2 * grid.n_points();
    if nm == 0 || nm > dim {
        return Err(ContainerError::DimensionMismatch(format!("{nm} modes for a field of {dim} values")));
    }
    let energy_fraction = r.f64()?;
    let singular_values = DVector::from_vec(r.f64s(nm)?);
    let mean_field = DVector::from_vec(r.f64s(dim)?);
    let modes = DMatrix::from_vec(dim, nm, r.f64s(dim * nm)?);
    let coeffs = r.f64s(n_train.checked_mul(nm).unwrap_or(usize::MAX))?;
    let temporal_coeffs = DMatrix::from_row_slice(n_train, nm, &coeffs);
    Ok(PodBasis {
        grid,
        modes,
        singular_values,
        temporal_coeffs,
        mean_field,
        energy_fraction,
    })
}

fn sparse_triples(w: &mut Writer, m: &DMatrix<f64>) {
    let nnz: Vec<(usize, usize, f64)> = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .filter_map(|(i, j)| (m[(i, j)] != 0.0).then(|| (i, j, m[(i, j)])))
        .collect();
    w.u64(nnz.len() as u64);
    for (i, j, v) in nnz {
        w.u32(i as u32);
        w.u32(j as u32);
        w.f64(v);
    }
}

fn read_triples(r: &mut Reader, rows: usize, cols: usize) -> Result<DMatrix<f64>, ContainerError> {
    let nnz = r.u64()? as usize;
    r.ensure(nnz.checked_mul(16).unwrap_or(usize::MAX))?;
    let mut m = DMatrix::zeros(rows, cols);
    for _ in 0..nnz {
        let i = r.u32()? as usize;
        let j = r.u32()? as usize;
        let v = r.f64()?;
        if i >= rows || j >= cols {
            return Err(ContainerError::DimensionMismatch(format!("entry ({i}, {j}) outside {rows}x{cols}")));
        }
        m[(i, j)] = v;
    }
    Ok(m)
}

fn encode_esn(model: &EsnModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer(Vec::new());
    w.u32(model.n_reservoir() as u32);
    w.u32(model.n_inputs() as u32);
    w.f64(c.spectral_radius);
    w.f64(c.input_scaling);
    w.f64(c.connectivity);
    w.f64(c.tikhonov);
    w.f64(c.input_bias);
    w.u64(c.washout as u64);
    w.u64(c.seed);
    w.f64(model.phi_scale);
    w.f64s(model.g.iter());
    sparse_triples(&mut w, &model.w_in);
    sparse_triples(&mut w, &model.w);
    for i in 0..model.w_out.nrows() {
        w.f64s(model.w_out.row(i).iter());
    }
    w.0
}

fn decode_esn(r: &mut Reader) -> Result<EsnModel, ContainerError> {
    let nr = r.u32()? as usize;
    let nm = r.u32()? as usize;
    if nr == 0 || nm == 0 {
        return Err(ContainerError::DimensionMismatch(format!("reservoir {nr} with {nm} inputs")));
    }
    let config = EsnConfig {
        n_reservoir: nr,
        spectral_radius: r.f64()?,
        input_scaling: r.f64()?,
        connectivity: r.f64()?,
        tikhonov: r.f64()?,
        input_bias: r.f64()?,
        washout: r.u64()? as usize,
        seed: r.u64()?,
    };
    let phi_scale = r.f64()?;
    let g = DVector::from_vec(r.f64s(nm)?);
    let w_in = read_triples(r, nr, nm + 1)?;
    let w = read_triples(r, nr, nr)?;
    let w_out = DMatrix::from_row_slice(nm, nr + 1, &r.f64s(nm * (nr + 1))?);
    Ok(EsnModel {
        config,
        w_in,
        w,
        w_out,
        g,
        phi_scale,
    })
}

/// One-line-per-item description of a container, as printed by `inspect`.
pub fn describe(c: &Container) -> String {
    let g = &c.snapshots.grid;
    let mut out = format!(
        "grid: nx={} ny={} dx={} dy={} dt={}\nnt: {}\n",
        g.nx,
        g.ny,
        g.dx,
        g.dy,
        g.dt,
        c.snapshots.nt()
    );
    if let Some(p) = &c.pod {
        out.push_str(&format!(
            "section PODB\nmodes: {}\ntraining snapshots: {}\nenergy: {:.6}\nsingular values: {}\n",
            p.n_modes(),
            p.temporal_coeffs.nrows(),
            p.energy_fraction,
            p.singular_values.iter().map(|s| format!("{s:.6e}")).collect::<Vec<_>>().join(" ")
        ));
    }
    if let Some(m) = &c.esn {
        out.push_str(&format!(
            "section ESNM\nreservoir: {}\ninputs: {}\nspectral radius: {}\ninput scaling: {}\ntikhonov: {:e}\nwashout: {}\n",
            m.n_reservoir(),
            m.n_inputs(),
            m.config.spectral_radius,
            m.config.input_scaling,
            m.config.tikhonov,
            m.config.washout
        ));
    }
    out
}
