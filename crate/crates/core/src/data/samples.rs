use lorafwi_tensor::{Scalar, Tensor};

use super::dataset::Dataset;
use super::normalize::NormalizationStats;
use crate::error::{Error, Result};

/// Normalized pairs ready for batching: inputs `[S, T, R]` and targets
/// `[1, V, V]`, both in `[-1, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> SampleSet<T> {
    /// Normalizes the selected samples of `dataset` with `stats`.
    pub fn from_dataset(dataset: &Dataset, indices: &[usize], stats: &NormalizationStats) -> Result<Self> {
        let mut out = Self::default();
        for &i in indices {
            let s = dataset
                .samples
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("sample {i} out of range for {}", dataset.name)))?;
            out.inputs.push(stats.normalize_seismic(&s.seismic.cast::<T>())?);
            let v = stats.normalize_velocity(&s.velocity.cast::<T>())?;
            let side = v.shape().to_vec();
            out.targets.push(v.reshape(vec![1, side[0], side[1]])?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn extend(&mut self, other: Self) {
        self.inputs.extend(other.inputs);
        self.targets.extend(other.targets);
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    /// Stacks the selected pairs into `[B, S, T, R]` and `[B, 1, V, V]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let pick = |v: &[Tensor<T>]| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Ok((Tensor::stack(&pick(&self.inputs))?, Tensor::stack(&pick(&self.targets))?))
    }

    pub fn cast<U: Scalar>(&self) -> SampleSet<U> {
        SampleSet {
            inputs: self.inputs.iter().map(|t| t.cast()).collect(),
            targets: self.targets.iter().map(|t| t.cast()).collect(),
        }
    }
}
