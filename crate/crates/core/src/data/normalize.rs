use lorafwi_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavesim::{V_MAX, V_MIN};

/// Scale constants for mapping raw samples onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// Largest `|sign(x) ln(1 + |x|)|` over the fitting set.
    pub seismic_max_abs_log: f64,
    pub velocity_range: (f64, f64),
}

fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

impl NormalizationStats {
    /// Fits the seismic scale on the given gathers; the velocity range is
    /// the fixed physical one.
    pub fn fit<'a, T: Scalar>(gathers: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Self> {
        let max = gathers
            .into_iter()
            .flat_map(|g| g.data().iter())
            .fold(0.0f64, |m, v| m.max(signed_log(v.to_f64_lossy()).abs()));
        let stats = Self {
            seismic_max_abs_log: max,
            velocity_range: (V_MIN, V_MAX),
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seismic_max_abs_log > 0.0 && self.seismic_max_abs_log.is_finite()) {
            return Err(Error::Invalid(format!(
                "seismic scale must be positive, got {}",
                self.seismic_max_abs_log
            )));
        }
        let (lo, hi) = self.velocity_range;
        if !(lo < hi) {
            return Err(Error::Invalid(format!("velocity range ({lo}, {hi}) is empty")));
        }
        Ok(())
    }

    /// `sign(x) ln(1 + |x|) / max`, clamped to `[-1, 1]`.
    pub fn normalize_seismic<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let m = self.seismic_max_abs_log;
        Ok(x.map(|v| T::of((signed_log(v.to_f64_lossy()) / m).clamp(-1.0, 1.0))))
    }

    /// Inverse of the unclamped seismic map.
    pub fn denormalize_seismic<T: Scalar>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let m = self.seismic_max_abs_log;
        Ok(y.map(|v| {
            let v = v.to_f64_lossy();
            T::of(v.signum() * (v.abs() * m).exp_m1())
        }))
    }

    /// Linear map of `[v_min, v_max]` onto `[-1, 1]`.
    pub fn normalize_velocity<T: Scalar>(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let (lo, hi) = self.velocity_range;
        if let Some(bad) = v.data().iter().map(|x| x.to_f64_lossy()).find(|x| !(lo..=hi).contains(x)) {
            return Err(Error::Invalid(format!("velocity {bad} outside [{lo}, {hi}]")));
        }
        Ok(v.map(|x| T::of(2.0 * (x.to_f64_lossy() - lo) / (hi - lo) - 1.0)))
    }

    pub fn denormalize_velocity<T: Scalar>(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let (lo, hi) = self.velocity_range;
        Ok(y.map(|x| T::of(lo + (x.to_f64_lossy() + 1.0) * (hi - lo) / 2.0)))
    }
}
