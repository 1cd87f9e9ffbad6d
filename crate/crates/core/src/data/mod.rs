//! Synthetic datasets: velocity families, simulation, persistence,
//! normalization and index splits.

mod dataset;
mod generate;
mod normalize;
mod samples;
mod split;

pub use dataset::{synthesize_dataset, Dataset, DatasetSpec, RawSample, DATASET_MAGIC, DATASET_VERSION};
pub use generate::{generate_velocity, generate_velocity_with_info, params, Difficulty, Family, FaultInfo, StructureInfo};
pub use normalize::NormalizationStats;
pub use samples::SampleSet;
pub use split::{split, subsample, FRACTIONS};
