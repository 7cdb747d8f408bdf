//! 1/f-corrected loss weighting for masked spectrogram reconstruction.
//!
//! Neural power spectra fall off roughly as `1/f^beta`, so after the log10
//! transform the low-frequency bins carry the largest magnitudes and a plain
//! MAE is dominated by them. The mean log-spectrum `p` of the training data
//! is approximately `c - log10(f)`; the per-bin weight
//!
//! ```text
//! k_i = log10(f_i) + mean(p)
//! ```
//!
//! grows with frequency and counteracts that bias. The reconstruction loss is
//! the mean over masked elements of `|k_j * (y_tj - ŷ_tj)|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    pub center_hz: f64,
    /// Peak height in log10 power units.
    pub height_log10: f64,
    pub width_hz: f64,
}

/// Power-law background plus Gaussian peaks, all in the log10 domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AperiodicModel {
    pub beta: f64,
    pub offset: f64,
    pub peaks: Vec<SpectralPeak>,
}

impl AperiodicModel {
    pub fn validate(&self, fs_hz: f64) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Validation(format!("beta must be >= 0, got {}", self.beta)));
        }
        for p in &self.peaks {
            if !(p.width_hz > 0.0) {
                return Err(Error::Validation(format!("peak width must be > 0, got {}", p.width_hz)));
            }
            if !(p.center_hz > 0.0 && p.center_hz < fs_hz / 2.0) {
                return Err(Error::Validation(format!(
                    "peak center {} Hz outside (0, {})",
                    p.center_hz,
                    fs_hz / 2.0
                )));
            }
        }
        Ok(())
    }
}

/// Evaluate `offset - beta*log10(f) + Σ height*exp(-(f-c)²/(2w²))` per bin.
pub fn synth_log_psd(model: &AperiodicModel, freqs: &[f64]) -> Vec<f64> {
    freqs
        .iter()
        .map(|&f| {
            let periodic: f64 = model
                .peaks
                .iter()
                .map(|p| {
                    let d = f - p.center_hz;
                    p.height_log10 * (-d * d / (2.0 * p.width_hz * p.width_hz)).exp()
                })
                .sum();
            model.offset - model.beta * f.log10() + periodic
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanLogProfile {
    pub p: Vec<f64>,
}

/// Column-wise mean of an `N x F` collection of log10 spectra.
pub fn mean_log_profile<R: AsRef<[f64]>>(spectra: &[R]) -> Result<MeanLogProfile> {
    let first = spectra
        .first()
        .ok_or_else(|| Error::Validation("mean_log_profile needs at least one spectrum".into()))?;
    let width = first.as_ref().len();
    if width == 0 {
        return Err(Error::Validation("spectra have zero bins".into()));
    }
    let mut sum = vec![0.0; width];
    for (i, row) in spectra.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != width {
            return Err(Error::Validation(format!(
                "spectrum {i} has {} bins, expected {width}",
                row.len()
            )));
        }
        for (s, &v) in sum.iter_mut().zip(row) {
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite entry in spectrum {i}")));
            }
            *s += v;
        }
    }
    let n = spectra.len() as f64;
    Ok(MeanLogProfile {
        p: sum.into_iter().map(|s| s / n).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingVector {
    pub freqs: Vec<f64>,
    pub k: Vec<f64>,
    /// Weight at the hour-of-day position appended after the spectral bins.
    pub hour_weight: f64,
}

impl ScalingVector {
    /// Unit weights everywhere, which turns the scaled loss into plain MAE.
    pub fn unit(freqs: Vec<f64>) -> Self {
        let k = vec![1.0; freqs.len()];
        Self {
            freqs,
            k,
            hour_weight: 1.0,
        }
    }

    /// Per-feature weights for a full token: `k` followed by `hour_weight`.
    pub fn token_weights(&self) -> Vec<f64> {
        let mut w = self.k.clone();
        w.push(self.hour_weight);
        w
    }
}

fn check_freqs(freqs: &[f64]) -> Result<()> {
    if let Some(f) = freqs.iter().find(|&&f| !(f >= 1.0)) {
        return Err(Error::Domain(format!("frequency {f} Hz below 1 Hz")));
    }
    Ok(())
}

/// `k_i = log10(f_i) + mean(p)`.
pub fn scaling_vector(p: &MeanLogProfile, freqs: &[f64], hour_weight: f64) -> Result<ScalingVector> {
    check_freqs(freqs)?;
    if p.p.len() != freqs.len() {
        return Err(Error::Validation(format!(
            "profile has {} bins but {} frequencies given",
            p.p.len(),
            freqs.len()
        )));
    }
    let mean = p.p.iter().sum::<f64>() / p.p.len() as f64;
    Ok(ScalingVector {
        freqs: freqs.to_vec(),
        k: freqs.iter().map(|f| f.log10() + mean).collect(),
        hour_weight,
    })
}

/// Population standard deviation over bins of `log10(f) + p(f)`; zero when
/// the mean spectrum is exactly `c - log10(f)`.
pub fn alignment_residual(p: &MeanLogProfile, freqs: &[f64]) -> Result<f64> {
    check_freqs(freqs)?;
    if p.p.len() != freqs.len() || freqs.is_empty() {
        return Err(Error::Validation("profile and frequency lengths differ".into()));
    }
    let s: Vec<f64> = freqs.iter().zip(&p.p).map(|(f, v)| f.log10() + v).collect();
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    Ok((s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

/// Mean over every element of the masked rows of `|w_j (target - prediction)|`.
///
/// `weights` has one entry per column (spectral `k` plus the hour weight).
pub fn scaled_masked_mae(
    target: &Matrix,
    prediction: &Matrix,
    weights: &[f64],
    mask: &[usize],
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Validation("mask is empty".into()));
    }
    if target.shape() != prediction.shape() {
        return Err(Error::Validation(format!(
            "target {:?} vs prediction {:?}",
            target.shape(),
            prediction.shape()
        )));
    }
    if weights.len() != target.cols {
        return Err(Error::Validation(format!(
            "{} weights for {} columns",
            weights.len(),
            target.cols
        )));
    }
    let mut total = 0.0;
    for &t in mask {
        if t >= target.rows {
            return Err(Error::Validation(format!("mask index {t} out of range")));
        }
        total += target
            .row(t)
            .iter()
            .zip(prediction.row(t))
            .zip(weights)
            .map(|((y, yh), w)| (w * (y - yh)).abs())
            .sum::<f64>();
    }
    Ok(total / (mask.len() * target.cols) as f64)
}
