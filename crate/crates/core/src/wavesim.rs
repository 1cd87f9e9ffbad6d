//! 2-D constant-density acoustic modeling with a second-order 5-point
//! stencil, a Ricker point source and an exponential sponge on all four
//! sides.

use lorafwi_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const V_MIN: f64 = 1500.0;
pub const V_MAX: f64 = 4500.0;

/// Stability limit of `c * dt / dx` for the 2-D 5-point scheme.
pub const CFL_LIMIT: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// `(1 - 2 pi^2 f0^2 (t - t0)^2) exp(-pi^2 f0^2 (t - t0)^2)`
pub fn ricker(t: f64, f0: f64, t0: f64) -> f64 {
    let a = (std::f64::consts::PI * f0 * (t - t0)).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Grid spacing in m.
    pub dx: f64,
    /// Time step in s.
    pub dt: f64,
    pub nt: usize,
    /// Ricker peak frequency in Hz.
    pub f0: f64,
    /// Ricker delay in s.
    pub t0: f64,
    /// Wavelet scale factor.
    pub amplitude: f64,
    /// `(row, col)` grid points.
    pub sources: Vec<(usize, usize)>,
    pub receiver_row: usize,
    pub receiver_cols: Vec<usize>,
    pub sponge_width: usize,
    pub sponge_coeff: f64,
}

impl SimConfig {
    /// Surface acquisition on a `size x size` grid: `n_sources` shots evenly
    /// spaced on the top row, a receiver in every column of the top row.
    pub fn desk(size: usize, n_sources: usize, nt: usize) -> Self {
        let f0 = 15.0;
        let sources = (0..n_sources)
            .map(|k| {
                let col = if n_sources == 1 {
                    (size - 1) / 2
                } else {
                    (k as f64 * (size - 1) as f64 / (n_sources - 1) as f64).round() as usize
                };
                (0, col)
            })
            .collect();
        Self {
            dx: 10.0,
            dt: 1e-3,
            nt,
            f0,
            t0: 1.0 / f0,
            amplitude: 1.0,
            sources,
            receiver_row: 0,
            receiver_cols: (0..size).collect(),
            sponge_width: 10,
            sponge_coeff: 0.015,
        }
    }

    /// Acquisition matching a model's input geometry. Needs one receiver per
    /// map column, i.e. `in_receivers == out_size`.
    pub fn for_model(config: &ModelConfig) -> Result<Self> {
        if config.in_receivers != config.out_size {
            return Err(Error::Invalid(format!(
                "surface acquisition needs one receiver per column: {} receivers for a {} wide map",
                config.in_receivers, config.out_size
            )));
        }
        Ok(Self::desk(config.out_size, config.in_channels, config.in_time))
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !(ok(self.dx) && ok(self.dt) && ok(self.f0)) || self.nt == 0 {
            return Err(Error::Invalid("dx, dt, f0 and nt must be positive".into()));
        }
        if self.sources.is_empty() || self.receiver_cols.is_empty() {
            return Err(Error::Invalid("need at least one source and one receiver".into()));
        }
        if let Some(&(r, c)) = self.sources.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Invalid(format!("source ({r}, {c}) outside the {rows}x{cols} grid")));
        }
        if self.receiver_row >= rows || self.receiver_cols.iter().any(|&c| c >= cols) {
            return Err(Error::Invalid(format!("receiver outside the {rows}x{cols} grid")));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        hash64(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Velocity model in m/s, rows are depth.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityMap {
    grid: Tensor<f64>,
    pub dx: f64,
}

impl VelocityMap {
    pub fn new(grid: Tensor<f64>, dx: f64) -> Result<Self> {
        if grid.ndim() != 2 {
            return Err(Error::Invalid(format!("velocity grid must be 2-D, got {:?}", grid.shape())));
        }
        if let Some(v) = grid.data().iter().find(|v| !(V_MIN..=V_MAX).contains(*v)) {
            return Err(Error::Invalid(format!("velocity {v} outside [{V_MIN}, {V_MAX}]")));
        }
        Ok(Self { grid, dx })
    }

    pub fn constant(rows: usize, cols: usize, c: f64, dx: f64) -> Result<Self> {
        Self::new(Tensor::full(vec![rows, cols], c)?, dx)
    }

    pub fn grid(&self) -> &Tensor<f64> {
        &self.grid
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.grid.data()[row * self.cols() + col]
    }

    pub fn max(&self) -> f64 {
        self.grid.data().iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.grid.numel() * 8 + 24);
        for &d in self.grid.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&self.dx.to_le_bytes());
        for v in self.grid.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        hash64(&bytes)
    }
}

/// Recorded pressure, `[S, T, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeismicGather {
    data: Tensor<f64>,
    pub velocity_hash: u64,
    pub config_hash: u64,
}

impl SeismicGather {
    pub fn new(data: Tensor<f64>, velocity_hash: u64, config_hash: u64) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(Error::Invalid(format!("gather must be [S, T, R], got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(Error::Invalid("gather contains non-finite samples".into()));
        }
        Ok(Self {
            data,
            velocity_hash,
            config_hash,
        })
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.data
    }

    /// Trace of one source and receiver.
    pub fn trace(&self, source: usize, receiver: usize) -> Vec<f64> {
        let s = self.data.shape();
        let (nt, nr) = (s[1], s[2]);
        (0..nt).map(|t| self.data.data()[(source * nt + t) * nr + receiver]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CflReport {
    /// `max(c) * dt / dx`
    pub courant: f64,
    pub limit: f64,
    /// Largest stable time step for this velocity and spacing.
    pub max_stable_dt: f64,
}

impl CflReport {
    pub fn new(max_velocity: f64, dx: f64, dt: f64) -> Self {
        Self {
            courant: max_velocity * dt / dx,
            limit: CFL_LIMIT,
            max_stable_dt: dx / (max_velocity * std::f64::consts::SQRT_2),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.courant <= self.limit
    }
}

pub fn cfl_check(vel: &VelocityMap, config: &SimConfig) -> CflReport {
    CflReport::new(vel.max(), config.dx, config.dt)
}

/// Padded grid with precomputed coefficients for one velocity model.
pub struct Propagator {
    rows: usize,
    cols: usize,
    pad: usize,
    /// `c^2 dt^2`
    c2dt2: Vec<f64>,
    /// `c^2 dt^2 / dx^2`
    courant2: Vec<f64>,
    damp: Vec<f64>,
}

impl Propagator {
    pub fn new(vel: &VelocityMap, config: &SimConfig) -> Result<Self> {
        let report = cfl_check(vel, config);
        if !report.is_ok() {
            return Err(Error::Cfl(format!(
                "courant number {:.4} exceeds {:.4}; max stable dt is {:.4e} s",
                report.courant, report.limit, report.max_stable_dt
            )));
        }
        config.validate(vel.rows(), vel.cols())?;
        let pad = config.sponge_width;
        let (rows, cols) = (vel.rows() + 2 * pad, vel.cols() + 2 * pad);
        let dt2 = config.dt * config.dt;
        let mut c2dt2 = Vec::with_capacity(rows * cols);
        let mut damp = Vec::with_capacity(rows * cols);
        let dist = |i: usize, n: usize| pad.saturating_sub(i).max((i + 1 + pad).saturating_sub(n));
        for i in 0..rows {
            let vi = i.saturating_sub(pad).min(vel.rows() - 1);
            for j in 0..cols {
                let vj = j.saturating_sub(pad).min(vel.cols() - 1);
                let c = vel.at(vi, vj);
                c2dt2.push(c * c * dt2);
                let d = dist(i, rows).max(dist(j, cols));
                damp.push(if d == 0 { 1.0 } else { (-(config.sponge_coeff * d as f64).powi(2)).exp() });
            }
        }
        let inv_dx2 = 1.0 / (config.dx * config.dx);
        Ok(Self {
            rows,
            cols,
            pad,
            courant2: c2dt2.iter().map(|v| v * inv_dx2).collect(),
            c2dt2,
            damp,
        })
    }

    /// Padded field length.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Padded index of an unpadded grid point.
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row + self.pad) * self.cols + col + self.pad
    }

    /// `next = damp * (2 curr - prev + c^2 dt^2 (lap(curr) / dx^2 + s))` with
    /// `s` nonzero at one point. The outermost ring is held at zero.
    pub fn step(&self, prev: &[f64], curr: &[f64], source: Option<(usize, f64)>, next: &mut [f64]) {
        let n = self.cols;
        for i in 1..self.rows - 1 {
            let row = i * n;
            for j in row + 1..row + n - 1 {
                let lap = curr[j - n] + curr[j + n] + curr[j - 1] + curr[j + 1] - 4.0 * curr[j];
                next[j] = 2.0 * curr[j] - prev[j] + self.courant2[j] * lap;
            }
        }
        if let Some((idx, s)) = source {
            next[idx] += self.c2dt2[idx] * s;
        }
        for (v, d) in next.iter_mut().zip(&self.damp) {
            *v *= d;
        }
    }
}

/// Runs every shot and records `p^n` at the receivers for `n = 0..nt`.
pub fn forward_model(vel: &VelocityMap, config: &SimConfig) -> Result<SeismicGather> {
    let prop = Propagator::new(vel, config)?;
    let (ns, nt, nr) = (config.sources.len(), config.nt, config.receiver_cols.len());
    let receivers: Vec<usize> = config.receiver_cols.iter().map(|&c| prop.index(config.receiver_row, c)).collect();
    let wavelet: Vec<f64> = (0..nt)
        .map(|n| config.amplitude * ricker(n as f64 * config.dt, config.f0, config.t0))
        .collect();
    let mut data = vec![0.0f64; ns * nt * nr];
    for (s, &(sr, sc)) in config.sources.iter().enumerate() {
        let src = prop.index(sr, sc);
        let mut prev = vec![0.0; prop.len()];
        let mut curr = vec![0.0; prop.len()];
        let mut next = vec![0.0; prop.len()];
        for (n, &amp) in wavelet.iter().enumerate() {
            let out = &mut data[(s * nt + n) * nr..(s * nt + n + 1) * nr];
            for (o, &r) in out.iter_mut().zip(&receivers) {
                *o = curr[r];
            }
            if out.iter().any(|v| !v.is_finite()) || (n % 32 == 31 && !curr.iter().sum::<f64>().is_finite()) {
                return Err(Error::Unstable { step: n });
            }
            prop.step(&prev, &curr, Some((src, amp)), &mut next);
            std::mem::swap(&mut prev, &mut curr);
            std::mem::swap(&mut curr, &mut next);
        }
    }
    SeismicGather::new(Tensor::new(vec![ns, nt, nr], data)?, vel.hash(), config.hash())
}

/// Fractional sample index where `|x|` first reaches `frac` of its maximum,
/// linearly interpolated between samples.
pub fn onset(x: &[f64], frac: f64) -> Option<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return None;
    }
    let th = frac * peak;
    let i = x.iter().position(|v| v.abs() >= th)?;
    if i == 0 {
        return Some(0.0);
    }
    let (a, b) = (x[i - 1].abs(), x[i].abs());
    Some((i - 1) as f64 + (th - a) / (b - a))
}

/// Far-field pulse shape of a 2-D point source: the half-order integral
/// `int_0^inf w(t - s) s^{-1/2} ds` of the wavelet, sampled at `n * dt`.
pub fn far_field_pulse(config: &SimConfig) -> Vec<f64> {
    // s = u^2 removes the singularity: 2 int_0^U w(t - u^2) du.
    let upper = (config.t0 + 6.0 / config.f0).sqrt();
    let steps = 4000;
    let h = upper / steps as f64;
    (0..config.nt)
        .map(|n| {
            let t = n as f64 * config.dt;
            let f = |k: usize| {
                let u = k as f64 * h;
                ricker(t - u * u, config.f0, config.t0)
            };
            let mut acc = f(0) + f(steps);
            for k in 1..steps {
                acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k);
            }
            2.0 * acc * h / 3.0
        })
        .collect()
}

/// First-arrival time of a trace, measured against the onset of the
/// far-field pulse so that the wavelet's own lead-in cancels.
pub fn first_arrival_time(trace: &[f64], config: &SimConfig, frac: f64) -> Option<f64> {
    let reference = onset(&far_field_pulse(config), frac)?;
    Some((onset(trace, frac)? - reference) * config.dt)
}
