//! Velocity-model families: layered, folded, faulted and random-field maps.

use std::fmt;
use std::str::FromStr;

use lorafwi_tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavesim::{VelocityMap, V_MAX, V_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    FlatVel,
    CurveVel,
    FlatFault,
    CurveFault,
    Style,
}

impl Family {
    pub const ALL: [Family; 5] = [Self::FlatVel, Self::CurveVel, Self::FlatFault, Self::CurveFault, Self::Style];

    pub fn name(self) -> &'static str {
        match self {
            Self::FlatVel => "flat-vel",
            Self::CurveVel => "curve-vel",
            Self::FlatFault => "flat-fault",
            Self::CurveFault => "curve-fault",
            Self::Style => "style",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|f| f.name()).collect();
            Error::Invalid(format!("unknown family {s:?}, expected one of {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    A,
    B,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            _ => Err(Error::Invalid(format!("unknown difficulty {s:?}, expected A or B"))),
        }
    }
}

/// Generator constants. Lengths are fractions of the map side so that the
/// families look alike on the 32 and 70 cell grids.
pub mod params {
    /// Layer counts (inclusive) for the easy and hard variants.
    pub const LAYERS_A: (usize, usize) = (2, 4);
    pub const LAYERS_B: (usize, usize) = (3, 5);
    /// Interface fold amplitude as a fraction of the map side.
    pub const FOLD_AMPLITUDE_A: (f64, f64) = (0.02, 0.06);
    pub const FOLD_AMPLITUDE_B: (f64, f64) = (0.06, 0.15);
    /// Fold wavelength as a fraction of the map side.
    pub const FOLD_WAVELENGTH: (f64, f64) = (0.5, 1.5);
    /// Fault throw in cells is drawn from `side / den` for these denominators.
    pub const THROW_A: (usize, usize) = (16, 8);
    pub const THROW_B: (usize, usize) = (8, 4);
    /// Maximum fault dip from vertical, degrees.
    pub const FAULT_DIP_DEG: f64 = 25.0;
    /// Gaussian smoothing length of the random field as a fraction of the side.
    pub const STYLE_SIGMA_A: f64 = 1.0 / 8.0;
    pub const STYLE_SIGMA_B: f64 = 1.0 / 24.0;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultInfo {
    /// Vertical offset of the hanging wall in cells.
    pub throw: usize,
    /// Fault column at each row.
    pub trace: Vec<f64>,
    /// Whether the shifted block lies right of the trace.
    pub hanging_right: bool,
}

/// What the generator built, for inspection in tests and tooling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructureInfo {
    /// Top row of each layer below the first, before folding or faulting.
    pub interfaces: Vec<usize>,
    pub fault: Option<FaultInfo>,
}

struct Layered {
    interfaces: Vec<f64>,
    velocities: Vec<f64>,
    fold_amplitude: f64,
    fold_wavenumber: f64,
    fold_phase: f64,
}

impl Layered {
    fn at(&self, row: f64, col: usize) -> f64 {
        let shift = self.fold_amplitude * (self.fold_wavenumber * col as f64 + self.fold_phase).sin();
        let layer = self.interfaces.iter().filter(|&&z| z + shift <= row).count();
        self.velocities[layer]
    }
}

fn layered(difficulty: Difficulty, size: usize, curved: bool, reserve: usize, rng: &mut impl Rng) -> (Layered, Vec<usize>) {
    let (lo, hi) = match difficulty {
        Difficulty::A => params::LAYERS_A,
        Difficulty::B => params::LAYERS_B,
    };
    let n_layers = rng.random_range(lo..=hi);
    // Interfaces start at row 2 and leave `reserve + 2` rows at the bottom.
    let span = size.saturating_sub(reserve + 4).max(n_layers);
    let mut interfaces: Vec<usize> = sample(rng, span, n_layers - 1).into_iter().map(|z| z + 2).collect();
    interfaces.sort_unstable();
    let mut velocities: Vec<f64> = (0..n_layers).map(|_| rng.random_range(V_MIN..=V_MAX)).collect();
    velocities.sort_by(f64::total_cmp);
    let (fold_amplitude, fold_wavenumber, fold_phase) = if curved {
        let (a0, a1) = match difficulty {
            Difficulty::A => params::FOLD_AMPLITUDE_A,
            Difficulty::B => params::FOLD_AMPLITUDE_B,
        };
        let amp = rng.random_range(a0..a1) * size as f64;
        let wavelength = rng.random_range(params::FOLD_WAVELENGTH.0..params::FOLD_WAVELENGTH.1) * size as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        (amp, std::f64::consts::TAU / wavelength, phase)
    } else {
        (0.0, 0.0, 0.0)
    };
    let model = Layered {
        interfaces: interfaces.iter().map(|&z| z as f64).collect(),
        velocities,
        fold_amplitude,
        fold_wavenumber,
        fold_phase,
    };
    (model, interfaces)
}

fn layered_grid(model: &Layered, size: usize) -> Vec<f64> {
    (0..size * size).map(|k| model.at((k / size) as f64, k % size)).collect()
}

fn faulted(difficulty: Difficulty, size: usize, curved: bool, rng: &mut impl Rng) -> (Vec<f64>, StructureInfo) {
    let (d0, d1) = match difficulty {
        Difficulty::A => params::THROW_A,
        Difficulty::B => params::THROW_B,
    };
    let (t_lo, t_hi) = ((size / d0).max(1), (size / d1).max(2));
    let throw = rng.random_range(t_lo.min(t_hi)..=t_hi);
    let (model, interfaces) = layered(difficulty, size, curved, throw, rng);
    let center = rng.random_range(0.4..0.6) * size as f64;
    let dip = rng.random_range(-params::FAULT_DIP_DEG..params::FAULT_DIP_DEG).to_radians().tan();
    let hanging_right = rng.random_bool(0.5);
    let mid = size as f64 / 2.0;
    let trace: Vec<f64> = (0..size).map(|i| center + (i as f64 - mid) * dip).collect();
    let grid = (0..size * size)
        .map(|k| {
            let (i, j) = (k / size, k % size);
            let right = j as f64 > trace[i];
            if right == hanging_right {
                model.at(i as f64 - throw as f64, j)
            } else {
                model.at(i as f64, j)
            }
        })
        .collect();
    (
        grid,
        StructureInfo {
            interfaces,
            fault: Some(FaultInfo {
                throw,
                trace,
                hanging_right,
            }),
        },
    )
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable smoothing with edge clamping.
fn smooth(grid: &[f64], size: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; grid.len()];
    for i in 0..size {
        for j in 0..size {
            tmp[i * size + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * grid[i * size + clamp(j as isize + k as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; grid.len()];
    for i in 0..size {
        for j in 0..size {
            out[i * size + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(i as isize + k as isize - r) * size + j])
                .sum();
        }
    }
    out
}

fn style(difficulty: Difficulty, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    let frac = match difficulty {
        Difficulty::A => params::STYLE_SIGMA_A,
        Difficulty::B => params::STYLE_SIGMA_B,
    };
    let noise: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(rng)).collect();
    let field = smooth(&noise, size, &gaussian_kernel((frac * size as f64).max(0.5)));
    let (lo, hi) = field.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    field.iter().map(|v| V_MIN + (v - lo) / range * (V_MAX - V_MIN)).collect()
}

/// Draws one `size x size` map with 10 m spacing, plus what was built.
pub fn generate_velocity_with_info(
    family: Family,
    difficulty: Difficulty,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(VelocityMap, StructureInfo)> {
    if size < 8 {
        return Err(Error::Invalid(format!("velocity maps need at least 8x8 cells, got {size}")));
    }
    let (grid, info) = match family {
        Family::FlatVel | Family::CurveVel => {
            let (model, interfaces) = layered(difficulty, size, family == Family::CurveVel, 0, rng);
            (
                layered_grid(&model, size),
                StructureInfo {
                    interfaces,
                    fault: None,
                },
            )
        }
        Family::FlatFault => faulted(difficulty, size, false, rng),
        Family::CurveFault => faulted(difficulty, size, true, rng),
        Family::Style => (style(difficulty, size, rng), StructureInfo::default()),
    };
    let grid = grid.into_iter().map(|v| v.clamp(V_MIN, V_MAX)).collect();
    Ok((VelocityMap::new(Tensor::new(vec![size, size], grid)?, 10.0)?, info))
}

pub fn generate_velocity(family: Family, difficulty: Difficulty, size: usize, rng: &mut impl Rng) -> Result<VelocityMap> {
    Ok(generate_velocity_with_info(family, difficulty, size, rng)?.0)
}
