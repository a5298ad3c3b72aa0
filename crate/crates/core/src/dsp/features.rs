use serde::{Deserialize, Serialize};

use super::stft::Spectrogram;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Floor added to magnitudes before the logarithm and to variances before
/// the square root.
pub const EPS_FLOOR: f64 = 1e-8;

/// `ln(|X| + 1e-8)` per time-frequency bin.
pub fn log_amplitude_features(spec: &Spectrogram) -> Tensor {
    spec.magnitude().map(|m| (m + EPS_FLOOR).ln())
}

/// Per-frequency mean and variance of log-amplitude features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    /// Identity statistics (zero mean, unit variance).
    pub fn identity(bins: usize) -> Self {
        NormStats {
            mean: vec![0.0; bins],
            var: vec![1.0; bins],
        }
    }

    /// Pools all frames of all feature grids into one mean and (population)
    /// variance per frequency row.
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut bins = None;
        let mut count = 0usize;
        let mut sum = Vec::new();
        let mut sum_sq = Vec::new();
        for f in features {
            let (rows, cols) = f.dims2();
            match bins {
                None => {
                    bins = Some(rows);
                    sum = vec![0.0; rows];
                    sum_sq = vec![0.0; rows];
                }
                Some(b) if b != rows => return Err(Error::shape("norm-stats", &[&[b], f.shape()])),
                Some(_) => {}
            }
            for (r, row) in f.data().chunks(cols).enumerate() {
                sum[r] += row.iter().sum::<f64>();
                sum_sq[r] += row.iter().map(|v| v * v).sum::<f64>();
            }
            count += cols;
        }
        if count == 0 {
            return Err(Error::Data("no frames to compute normalization statistics from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        Ok(NormStats { mean, var })
    }

    pub fn bins(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, features: &Tensor) -> Result<(usize, usize)> {
        if features.rank() != 2 || features.shape()[0] != self.mean.len() || self.var.len() != self.mean.len() {
            return Err(Error::shape("normalize", &[features.shape(), &[self.mean.len()], &[self.var.len()]]));
        }
        if self.var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput("normalization variances must be finite and non-negative".into()));
        }
        Ok(features.dims2())
    }
}

/// `(x − mean_f) / sqrt(var_f + 1e-8)` for every frequency row `f`.
pub fn normalize_per_frequency(features: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (_, cols) = stats.check(features)?;
    let mut out = features.data().to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let inv = 1.0 / (stats.var[r] + EPS_FLOOR).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - stats.mean[r]) * inv);
    }
    Tensor::new(features.shape(), out)
}

/// Inverse of [`normalize_per_frequency`].
pub fn denormalize_per_frequency(normalized: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (_, cols) = stats.check(normalized)?;
    let mut out = normalized.data().to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let sd = (stats.var[r] + EPS_FLOOR).sqrt();
        row.iter_mut().for_each(|v| *v = *v * sd + stats.mean[r]);
    }
    Tensor::new(normalized.shape(), out)
}
