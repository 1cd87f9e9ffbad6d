//! `FWDS` dataset files:
//!
//! ```text
//! "FWDS" | u32 version | u64 n_samples
//! n_samples x (velocity record, gather record)
//! f64 seismic_max_abs_log | f64 v_min | f64 v_max
//! u32 CRC32 of everything before it
//! ```
//!
//! A record is `u8 dtype code | u8 ndim | u64 dims[ndim] | f32 payload`.
//! Velocities are stored in m/s and gathers as raw pressure; normalization
//! happens when a split is materialized.

use std::path::Path;

use lorafwi_tensor::{DType, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate_velocity, Difficulty, Family};
use super::normalize::NormalizationStats;
use crate::container::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::wavesim::{forward_model, CflReport, SimConfig, V_MAX};

pub const DATASET_MAGIC: &[u8; 4] = b"FWDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: Family,
    pub difficulty: Difficulty,
    pub n_samples: usize,
    pub seed: u64,
    pub sim: SimConfig,
    /// Map side V.
    pub size: usize,
}

impl DatasetSpec {
    /// Acquisition and map size taken from a model config.
    pub fn for_model(family: Family, difficulty: Difficulty, n_samples: usize, seed: u64, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            family,
            difficulty,
            n_samples,
            seed,
            sim: SimConfig::for_model(config)?,
            size: config.out_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Invalid(format!("a dataset needs at least 2 samples, got {}", self.n_samples)));
        }
        let cfl = CflReport::new(V_MAX, self.sim.dx, self.sim.dt);
        if !cfl.is_ok() {
            return Err(Error::Cfl(format!(
                "courant number {:.4} at {V_MAX} m/s exceeds {:.4}; max stable dt is {:.4e} s",
                cfl.courant, cfl.limit, cfl.max_stable_dt
            )));
        }
        self.sim.validate(self.size, self.size)
    }
}

/// One unnormalized pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    /// `[V, V]` in m/s.
    pub velocity: Tensor<f32>,
    /// `[S, T, R]` pressure.
    pub seismic: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Identifier used in reports; the file stem when read from disk.
    pub name: String,
    pub samples: Vec<RawSample>,
    /// Fitted over every sample in the file.
    pub stats: NormalizationStats,
}

/// Simulates every sample. Sample `i` draws from its own stream of the
/// seeded generator, so the output does not depend on evaluation order.
pub fn synthesize_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let sample = generate_velocity(spec.family, spec.difficulty, spec.size, &mut rng).and_then(|vel| {
            let gather = forward_model(&vel, &spec.sim)?;
            Ok(RawSample {
                velocity: vel.grid().cast(),
                seismic: gather.data().cast(),
            })
        });
        samples.push(sample.map_err(|e| Error::Sample {
            index: i,
            source: Box::new(e),
        })?);
    }
    let stats = NormalizationStats::fit(samples.iter().map(|s| &s.seismic))?;
    Ok(Dataset {
        name: format!("{}-{}", spec.family, spec.difficulty),
        samples,
        stats,
    })
}

fn push_record(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(DType::F32.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let code = r.u8()?;
    if DType::from_code(code) != Some(DType::F32) {
        return Err(Error::Corrupt(format!("unsupported dtype code {code}")));
    }
    let ndim = r.u8()? as usize;
    let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.filter(|&n| n > 0 && ndim > 0).ok_or_else(|| Error::Corrupt(format!("bad record shape {shape:?}")))?;
    let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("record too large".into()))?)?;
    Ok(Tensor::new(shape, bytes.chunks_exact(4).map(f32::read_le).collect())?)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(S, T, R, V)`
    pub fn dims(&self) -> Option<(usize, usize, usize, usize)> {
        let s = self.samples.first()?;
        let g = s.seismic.shape();
        Some((g[0], g[1], g[2], s.velocity.shape()[0]))
    }

    /// Whether the samples fit a model's input and output shapes.
    pub fn check_dims(&self, config: &ModelConfig) -> Result<()> {
        let want = (config.in_channels, config.in_time, config.in_receivers, config.out_size);
        match self.dims() {
            Some(d) if d == want => Ok(()),
            got => Err(Error::Invalid(format!(
                "dataset {} has (S, T, R, V) = {got:?}, model expects {want:?}",
                self.name
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            push_record(&mut out, &s.velocity);
            push_record(&mut out, &s.seismic);
        }
        out.extend_from_slice(&self.stats.seismic_max_abs_log.to_le_bytes());
        out.extend_from_slice(&self.stats.velocity_range.0.to_le_bytes());
        out.extend_from_slice(&self.stats.velocity_range.1.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], name: impl Into<String>) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Corrupt("file too short for a checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Corrupt(format!("CRC32 mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader::new(body);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::UnknownVersion {
                what: "dataset",
                version,
            });
        }
        let n = r.u64()? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let velocity = read_record(&mut r)?;
            let seismic = read_record(&mut r)?;
            if velocity.ndim() != 2 || seismic.ndim() != 3 {
                return Err(Error::Corrupt(format!("sample {i} has wrong record ranks")));
            }
            if let Some(first) = samples.first() {
                let first: &RawSample = first;
                if first.velocity.shape() != velocity.shape() || first.seismic.shape() != seismic.shape() {
                    return Err(Error::Corrupt(format!("sample {i} shape differs from sample 0")));
                }
            }
            samples.push(RawSample { velocity, seismic });
        }
        let stats = NormalizationStats {
            seismic_max_abs_log: r.f64()?,
            velocity_range: (r.f64()?, r.f64()?),
        };
        if !r.rest().is_empty() {
            return Err(Error::Corrupt("trailing bytes before checksum".into()));
        }
        stats.validate()?;
        Ok(Self {
            name: name.into(),
            samples,
            stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode())
    }

    /// Reads a file; the dataset is named after the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::decode(&read_file(path)?, name)
    }
}
