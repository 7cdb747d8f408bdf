//! Welch power-spectral-density estimation and the log10 power transform
//! that turns a signal window into token features.
//!
//! The estimator averages modified periodograms of overlapping,
//! Hann-tapered segments and reports a one-sided density in
//! signal-units²/Hz. With the default configuration (250 Hz, 1 s segments,
//! 50 % overlap) the bins sit exactly on integer frequencies 0..=125 Hz.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest floor `log_power` will use; anything below is raised to this.
pub const MIN_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taper {
    /// Periodic raised-cosine window.
    Hann,
    Rectangular,
}

impl Taper {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Taper::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
                .collect(),
            Taper::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WelchConfig {
    pub fs_hz: f64,
    pub segment_len_samples: usize,
    pub overlap_fraction: f64,
    pub window: Taper,
    pub log_floor: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            fs_hz: 250.0,
            segment_len_samples: 250,
            overlap_fraction: 0.5,
            window: Taper::Hann,
            log_floor: 1e-12,
        }
    }
}

impl WelchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs_hz > 0.0 && self.fs_hz.is_finite()) {
            return Err(Error::Validation(format!("fs_hz must be positive, got {}", self.fs_hz)));
        }
        if self.segment_len_samples < 2 {
            return Err(Error::Validation("segment_len_samples must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Validation(format!(
                "overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Validation(format!("log_floor must be positive, got {}", self.log_floor)));
        }
        Ok(())
    }

    /// Hop between segment starts.
    pub fn step(&self) -> usize {
        let overlap = (self.segment_len_samples as f64 * self.overlap_fraction).floor() as usize;
        (self.segment_len_samples - overlap).max(1)
    }

    pub fn n_bins(&self) -> usize {
        self.segment_len_samples / 2 + 1
    }

    pub fn resolution_hz(&self) -> f64 {
        self.fs_hz / self.segment_len_samples as f64
    }

    pub fn n_segments(&self, n_samples: usize) -> usize {
        if n_samples < self.segment_len_samples {
            0
        } else {
            (n_samples - self.segment_len_samples) / self.step() + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl PsdEstimate {
    pub fn resolution_hz(&self) -> f64 {
        if self.freqs.len() < 2 {
            0.0
        } else {
            self.freqs[1] - self.freqs[0]
        }
    }
}

/// Reusable Welch estimator holding the FFT plan and taper for one
/// configuration. Cheap to share across threads behind an `Arc`.
pub struct WelchEstimator {
    cfg: WelchConfig,
    taper: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl WelchEstimator {
    pub fn new(cfg: WelchConfig) -> Result<Self> {
        cfg.validate()?;
        let taper = cfg.window.coefficients(cfg.segment_len_samples);
        let energy: f64 = taper.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(cfg.segment_len_samples);
        Ok(Self {
            scale: 1.0 / (cfg.fs_hz * energy),
            cfg,
            taper,
            fft,
        })
    }

    pub fn config(&self) -> &WelchConfig {
        &self.cfg
    }

    pub fn estimate(&self, signal: &[f64]) -> Result<PsdEstimate> {
        let n = self.cfg.segment_len_samples;
        if signal.len() < n {
            return Err(Error::Length {
                needed: n,
                got: signal.len(),
            });
        }
        if let Some(i) = signal.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite sample at index {i}")));
        }

        let n_bins = self.cfg.n_bins();
        let n_seg = self.cfg.n_segments(signal.len());
        let step = self.cfg.step();
        let mut acc = vec![0.0; n_bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];

        for s in 0..n_seg {
            let seg = &signal[s * step..s * step + n];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.taper) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (a, c) in acc.iter_mut().zip(&buf) {
                *a += c.norm_sqr();
            }
        }

        let norm = self.scale / n_seg as f64;
        let nyquist = if n % 2 == 0 { Some(n / 2) } else { None };
        let power = acc
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let one_sided = if k == 0 || Some(k) == nyquist { 1.0 } else { 2.0 };
                a * norm * one_sided
            })
            .collect();
        let df = self.cfg.resolution_hz();
        let freqs = (0..n_bins).map(|k| k as f64 * df).collect();
        Ok(PsdEstimate { freqs, power })
    }
}

/// One-shot Welch estimate. Prefer [`WelchEstimator`] when estimating many
/// windows with the same configuration.
pub fn welch_psd(signal: &[f64], cfg: &WelchConfig) -> Result<PsdEstimate> {
    WelchEstimator::new(cfg.clone())?.estimate(signal)
}

/// `log10(power + floor)` element-wise. Floors below [`MIN_LOG_FLOOR`]
/// (including zero) are raised to it.
pub fn log_power(psd: &PsdEstimate, log_floor: f64) -> Vec<f64> {
    log_power_slice(&psd.power, log_floor)
}

pub fn log_power_slice(power: &[f64], log_floor: f64) -> Vec<f64> {
    let floor = if log_floor.is_finite() {
        log_floor.max(MIN_LOG_FLOOR)
    } else {
        MIN_LOG_FLOOR
    };
    power.iter().map(|p| (p + floor).log10()).collect()
}
