//! MAE, RMSE, SSIM and Sobel spatial information.

use lorafwi_tensor::{Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn residuals<'a, T: Scalar>(pred: &'a Tensor<T>, target: &'a Tensor<T>, op: &'static str) -> Result<impl Iterator<Item = f64> + 'a> {
    if pred.shape() != target.shape() {
        return Err(TensorError::mismatch(op, pred.shape(), target.shape()).into());
    }
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| p.to_f64_lossy() - t.to_f64_lossy()))
}

pub fn mae<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let sum: f64 = residuals(pred, target, "mae")?.map(f64::abs).sum();
    Ok(sum / pred.numel() as f64)
}

pub fn rmse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let sum: f64 = residuals(pred, target, "rmse")?.map(|r| r * r).sum();
    Ok((sum / pred.numel() as f64).sqrt())
}

/// Normalized 11x11 Gaussian window, row-major.
pub fn ssim_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
}

/// `(H, W)` of a tensor whose leading dimensions are all 1.
fn plane<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(TensorError::invalid(op, format!("expected a single 2-D image, got {s:?}")).into());
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Mean SSIM over all fully contained 11x11 windows, for images on a
/// `[0, 1]` scale (`L = 1`).
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(TensorError::mismatch("ssim", x.shape(), y.shape()).into());
    }
    let (h, w) = plane(x, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let win = ssim_window();
    let xs: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    let ys: Vec<f64> = y.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut total = 0.0;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                let row = (i + u) * w + j;
                for v in 0..SSIM_WINDOW {
                    let g = win[u * SSIM_WINDOW + v];
                    let (a, b) = (xs[row + v], ys[row + v]);
                    mx += g * a;
                    my += g * b;
                    sxx += g * (a * a);
                    syy += g * (b * b);
                    sxy += g * (a * b);
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64)
}

/// SSIM of maps given on `[-1, 1]`, after rescaling both to `[0, 1]`.
pub fn ssim_unit_rescaled<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let to_unit = |t: &Tensor<T>| t.cast::<f64>().map(|v| (v + 1.0) / 2.0);
    ssim(&to_unit(pred), &to_unit(target))
}

/// Mean Sobel gradient magnitude over interior pixels.
pub fn spatial_information<T: Scalar>(grid: &Tensor<T>) -> Result<f64> {
    let (h, w) = plane(grid, "spatial_information")?;
    if h < 3 || w < 3 {
        return Err(Error::Invalid(format!("spatial information needs at least 3x3, got {h}x{w}")));
    }
    let d: Vec<f64> = grid.data().iter().map(|v| v.to_f64_lossy()).collect();
    let at = |i: usize, j: usize| d[i * w + j];
    let mut total = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let gx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)) - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let gy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)) - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(total / ((h - 2) * (w - 2)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
}

impl SampleMetrics {
    /// Metrics of one predicted map against its target, both on `[-1, 1]`.
    pub fn compute<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, target)?,
            rmse: rmse(pred, target)?,
            ssim: ssim_unit_rescaled(pred, target)?,
        })
    }
}

/// Test-set means of the per-sample metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub n_samples: usize,
    pub per_sample: Option<Vec<SampleMetrics>>,
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, keep_per_sample: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("no samples to evaluate".into()));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mae: mean(|s| s.mae),
            rmse: mean(|s| s.rmse),
            ssim: mean(|s| s.ssim),
            n_samples: samples.len(),
            per_sample: keep_per_sample.then_some(samples),
        })
    }
}
