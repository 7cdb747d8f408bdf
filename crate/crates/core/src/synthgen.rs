//! Synthetic chronic field-potential cohort: power-law spectra with Gaussian
//! peaks, circadian peak modulation and wearable-style symptom labels whose
//! correlation with band power is planted in closed form.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss_scaling::{synth_log_psd, AperiodicModel, SpectralPeak};
use crate::seed::derive_seed;
use crate::spectral::WelchConfig;
use crate::tokenizer::{hour_feature, LabelRow, Recording, Symptom};

/// Midnight UTC, 2023-11-15.
pub const DEFAULT_START_UNIX_S: i64 = 1_700_006_400;
pub const LABEL_INTERVAL_S: i64 = 120;
const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circadian {
    pub band_hz: [f64; 2],
    /// Relative peak-height modulation, in [0, 1).
    pub depth: f64,
    pub acrophase_hour: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    pub band_hz: [f64; 2],
    pub gain: f64,
    pub noise_sd: f64,
    /// SD of the per-window latent driver added to peak heights in the band.
    pub driver_sd: f64,
}

impl LabelModel {
    /// Correlation between label and band power implied by the generator.
    pub fn planted_r(&self) -> f64 {
        let g = self.gain;
        let total = (g * g + self.noise_sd * self.noise_sd).sqrt();
        if total == 0.0 {
            0.0
        } else {
            g.abs() / total
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: String,
    pub fs_hz: f64,
    pub start_unix_s: i64,
    pub timezone_offset_s: i64,
    pub days: f64,
    pub spectrum: AperiodicModel,
    pub circadian: Circadian,
    /// Indexed by `Symptom::index`.
    pub labels: [LabelModel; 2],
    pub seed: u64,
}

fn check_band(what: &str, band: [f64; 2], nyquist: f64) -> Result<()> {
    if !(band[0] > 0.0 && band[0] < band[1] && band[1] < nyquist) {
        return Err(Error::Validation(format!(
            "{what} band {band:?} must satisfy 0 < lo < hi < {nyquist}"
        )));
    }
    Ok(())
}

impl SubjectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs_hz > 0.0) {
            return Err(Error::Validation("fs_hz must be positive".into()));
        }
        if !(self.days > 0.0) {
            return Err(Error::Validation("days must be positive".into()));
        }
        self.spectrum.validate(self.fs_hz)?;
        let nyq = self.fs_hz / 2.0;
        check_band("circadian", self.circadian.band_hz, nyq)?;
        if !(0.0..1.0).contains(&self.circadian.depth) {
            return Err(Error::Validation(format!(
                "circadian depth must lie in [0, 1), got {}",
                self.circadian.depth
            )));
        }
        for (s, lm) in Symptom::ALL.iter().zip(&self.labels) {
            check_band(s.name(), lm.band_hz, nyq)?;
            if !(lm.noise_sd >= 0.0 && lm.driver_sd >= 0.0 && lm.gain.is_finite()) {
                return Err(Error::Validation(format!("{} label model has a negative SD or bad gain", s.name())));
            }
        }
        Ok(())
    }

    pub fn n_windows(&self) -> usize {
        (self.days * SECONDS_PER_DAY / LABEL_INTERVAL_S as f64).floor() as usize
    }

    pub fn window_samples(&self) -> usize {
        (self.fs_hz * LABEL_INTERVAL_S as f64).round() as usize
    }
}

/// Inverse-FFT synthesizer for segments with a prescribed one-sided PSD.
pub struct SegmentSynth {
    n_samples: usize,
    fs_hz: f64,
    target_freqs: Vec<f64>,
    ifft: Arc<dyn Fft<f64>>,
}

impl SegmentSynth {
    /// `target_freqs` must be strictly increasing.
    pub fn new(n_samples: usize, fs_hz: f64, target_freqs: Vec<f64>) -> Result<Self> {
        if n_samples == 0 || n_samples % 2 != 0 {
            return Err(Error::Validation(format!("segment length must be even and positive, got {n_samples}")));
        }
        if target_freqs.is_empty() || target_freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("target frequencies must be strictly increasing".into()));
        }
        let ifft = FftPlanner::new().plan_fft_inverse(n_samples);
        Ok(Self {
            n_samples,
            fs_hz,
            target_freqs,
            ifft,
        })
    }

    fn interp(&self, target: &[f64], f: f64) -> f64 {
        let fr = &self.target_freqs;
        if f <= fr[0] {
            return target[0];
        }
        if f >= fr[fr.len() - 1] {
            return target[fr.len() - 1];
        }
        let j = fr.partition_point(|&x| x <= f);
        let (f0, f1) = (fr[j - 1], fr[j]);
        let t = (f - f0) / (f1 - f0);
        target[j - 1] * (1.0 - t) + target[j] * t
    }

    /// Random-phase realization of the log10 PSD `target` (one value per
    /// target frequency, linearly interpolated in the log domain).
    pub fn generate<R: Rng + ?Sized>(&self, target_log_psd: &[f64], rng: &mut R) -> Vec<f64> {
        assert_eq!(target_log_psd.len(), self.target_freqs.len(), "target length");
        let n = self.n_samples;
        let df = self.fs_hz / n as f64;
        let mut spec = vec![Complex::new(0.0, 0.0); n];
        for k in 1..n / 2 {
            let s = 10f64.powf(self.interp(target_log_psd, k as f64 * df));
            let amp = (2.0 * s * df).sqrt() / 2.0;
            let phi = rng.gen::<f64>() * 2.0 * PI;
            let c = Complex::from_polar(amp, phi);
            spec[k] = c;
            spec[n - k] = c.conj();
        }
        self.ifft.process(&mut spec);
        spec.into_iter().map(|c| c.re).collect()
    }

    /// Expected Welch log10 PSD, at the target frequencies, of segments
    /// generated from `target_log_psd`. Exact over the random phases.
    pub fn expected_welch(&self, target_log_psd: &[f64], welch: &WelchConfig) -> Result<Vec<f64>> {
        welch.validate()?;
        if (welch.fs_hz - self.fs_hz).abs() > 1e-9 {
            return Err(Error::Validation("Welch and synthesis sampling rates differ".into()));
        }
        let n = self.n_samples;
        let df = self.fs_hz / n as f64;
        if welch.segment_len_samples > n {
            return Err(Error::Validation("Welch segment longer than the synthesized segment".into()));
        }
        let bins: Vec<usize> = self
            .target_freqs
            .iter()
            .map(|&f| {
                let b = f / df;
                if (b - b.round()).abs() > 1e-9 {
                    Err(Error::Validation(format!("target frequency {f} Hz is off the synthesis grid")))
                } else {
                    Ok(b.round() as usize)
                }
            })
            .collect::<Result<_>>()?;
        // |W(d·df)|² for every d, from the zero-padded window's DFT.
        let w = welch.window.coefficients(welch.segment_len_samples);
        let norm = self.fs_hz * w.iter().map(|v| v * v).sum::<f64>();
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(w.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let kernel: Vec<f64> = buf.iter().map(|c| c.norm_sqr()).collect();
        let power: Vec<f64> = (1..n / 2)
            .map(|k| 10f64.powf(self.interp(target_log_psd, k as f64 * df)) * df)
            .collect();
        Ok(bins
            .iter()
            .map(|&m| {
                let e: f64 = power
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let k = i + 1;
                        p * (kernel[(m + n - k) % n] + kernel[(m + k) % n])
                    })
                    .sum::<f64>()
                    / norm;
                e.log10()
            })
            .collect())
    }

    /// Adjust a target so that the expected Welch estimate of the generated
    /// segments reproduces the original target (fixed-point iteration).
    pub fn precompensate(&self, target_log_psd: &[f64], welch: &WelchConfig, iterations: usize) -> Result<Vec<f64>> {
        let mut t = target_log_psd.to_vec();
        for _ in 0..iterations {
            let e = self.expected_welch(&t, welch)?;
            for ((ti, &want), got) in t.iter_mut().zip(target_log_psd).zip(e) {
                *ti += want - got;
            }
        }
        Ok(t)
    }
}

/// One segment with the target defined on 1, 2, ..., len Hz.
pub fn synth_segment<R: Rng + ?Sized>(
    target_log_psd: &[f64],
    n_samples: usize,
    fs_hz: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if target_log_psd.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("target log-PSD must be finite".into()));
    }
    let freqs = (1..=target_log_psd.len()).map(|f| f as f64).collect();
    Ok(SegmentSynth::new(n_samples, fs_hz, freqs)?.generate(target_log_psd, rng))
}

/// Integer frequencies 1..=124 Hz used as the synthesis grid.
pub fn target_freqs(fs_hz: f64) -> Vec<f64> {
    let top = (fs_hz / 2.0).ceil() as usize - 1;
    (1..=top).map(|f| f as f64).collect()
}

/// Per-window generating quantities, before any signal is rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub t_start_unix_s: i64,
    pub local_hour: f64,
    pub target_log_psd: Vec<f64>,
    /// Mean target log-power in each symptom band.
    pub band_power: [f64; 2],
    pub labels: [f64; 2],
}

fn band_mean(freqs: &[f64], values: &[f64], band: [f64; 2]) -> f64 {
    let (sum, n) = freqs
        .iter()
        .zip(values)
        .filter(|(f, _)| **f >= band[0] && **f <= band[1])
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn in_band(f: f64, band: [f64; 2]) -> bool {
    f >= band[0] && f <= band[1]
}

/// Draw drivers, spectra and labels for every window of a subject.
pub fn plan_windows(spec: &SubjectSpec) -> Result<Vec<WindowPlan>> {
    spec.validate()?;
    let freqs = target_freqs(spec.fs_hz);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "windows", 0));
    let n = spec.n_windows();
    let mut plans = Vec::with_capacity(n);
    for w in 0..n {
        let t = spec.start_unix_s + w as i64 * LABEL_INTERVAL_S;
        let local = (t + spec.timezone_offset_s).rem_euclid(SECONDS_PER_DAY as i64) as f64 / 3600.0;
        let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let c = &spec.circadian;
        let circ = 1.0 + c.depth * (2.0 * PI * (local - c.acrophase_hour) / 24.0).cos();
        let peaks = spec
            .spectrum
            .peaks
            .iter()
            .map(|p| {
                let mut h = p.height_log10;
                if in_band(p.center_hz, c.band_hz) {
                    h *= circ;
                }
                for (lm, zs) in spec.labels.iter().zip(z) {
                    if in_band(p.center_hz, lm.band_hz) {
                        h += lm.driver_sd * zs;
                    }
                }
                SpectralPeak { height_log10: h, ..*p }
            })
            .collect();
        let model = AperiodicModel {
            peaks,
            ..spec.spectrum.clone()
        };
        let target = synth_log_psd(&model, &freqs);
        let band_power = [
            band_mean(&freqs, &target, spec.labels[0].band_hz),
            band_mean(&freqs, &target, spec.labels[1].band_hz),
        ];
        plans.push(WindowPlan {
            t_start_unix_s: t,
            local_hour: local,
            target_log_psd: target,
            band_power,
            labels: [0.0; 2],
        });
    }

    for s in 0..2 {
        let lm = &spec.labels[s];
        let (mean, sd) = mean_sd(plans.iter().map(|p| p.band_power[s]));
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "label-noise", s as u64));
        for p in &mut plans {
            let zb = if sd > 0.0 { (p.band_power[s] - mean) / sd } else { 0.0 };
            let e: f64 = noise.sample(StandardNormal);
            p.labels[s] = lm.gain * zb + lm.noise_sd * e;
        }
    }
    Ok(plans)
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct SynthSubject {
    pub spec: SubjectSpec,
    pub recording: Recording,
    pub labels: Vec<LabelRow>,
}

const COMPENSATION_ITERATIONS: usize = 8;

/// Render a subject's full recording and its 2-minute label series. Window
/// targets are shifted by one per-subject correction so the Welch estimate
/// of the rendered signal is unbiased for the base spectrum.
pub fn synth_subject(spec: &SubjectSpec) -> Result<SynthSubject> {
    let plans = plan_windows(spec)?;
    let win = spec.window_samples();
    let freqs = target_freqs(spec.fs_hz);
    let synth = SegmentSynth::new(win, spec.fs_hz, freqs.clone())?;
    let base = synth_log_psd(&spec.spectrum, &freqs);
    let welch = WelchConfig {
        fs_hz: spec.fs_hz,
        ..WelchConfig::default()
    };
    let delta: Vec<f64> = synth
        .precompensate(&base, &welch, COMPENSATION_ITERATIONS)?
        .iter()
        .zip(&base)
        .map(|(c, b)| c - b)
        .collect();
    let mut target = vec![0.0; freqs.len()];
    let mut samples = Vec::with_capacity(plans.len() * win);
    let mut labels = Vec::with_capacity(plans.len());
    for (w, p) in plans.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "phase", w as u64));
        for ((t, p), d) in target.iter_mut().zip(&p.target_log_psd).zip(&delta) {
            *t = p + d;
        }
        samples.extend(synth.generate(&target, &mut rng).into_iter().map(|x| x as f32));
        labels.push(LabelRow {
            t_unix_s: p.t_start_unix_s,
            bradykinesia: p.labels[0],
            dyskinesia: p.labels[1],
        });
    }
    Ok(SynthSubject {
        spec: spec.clone(),
        recording: Recording {
            subject_id: spec.subject_id.clone(),
            fs_hz: spec.fs_hz,
            start_unix_s: spec.start_unix_s,
            timezone_offset_s: spec.timezone_offset_s,
            samples,
        },
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub days: f64,
    pub beta_range: [f64; 2],
    /// Offset = beta * mean(log10 f) + U(range), keeping mean log-power positive.
    pub offset_margin: [f64; 2],
    pub beta_peak_hz: [f64; 2],
    pub gamma_peak_hz: [f64; 2],
    pub beta_peak_height: [f64; 2],
    pub gamma_peak_height: [f64; 2],
    pub peak_width_hz: [f64; 2],
    pub bradykinesia_band_hz: [f64; 2],
    pub dyskinesia_band_hz: [f64; 2],
    pub gain: f64,
    pub noise_sd: f64,
    pub driver_sd: f64,
    pub circadian_depth: f64,
    pub timezone_offset_s: i64,
    pub start_unix_s: i64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            days: 2.0,
            beta_range: [1.0, 2.0],
            offset_margin: [0.2, 0.6],
            beta_peak_hz: [18.0, 22.0],
            gamma_peak_hz: [62.0, 68.0],
            beta_peak_height: [0.6, 1.0],
            gamma_peak_height: [0.3, 0.6],
            peak_width_hz: [2.0, 3.5],
            bradykinesia_band_hz: [13.0, 30.0],
            dyskinesia_band_hz: [55.0, 75.0],
            gain: 1.0,
            noise_sd: 0.75,
            driver_sd: 0.3,
            circadian_depth: 0.2,
            timezone_offset_s: 0,
            start_unix_s: DEFAULT_START_UNIX_S,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.gen::<f64>()
}

/// Subject specifications of the default cohort; signals are not rendered.
pub fn cohort_specs(cfg: &CohortConfig, master_seed: u64) -> Result<Vec<SubjectSpec>> {
    if cfg.n_subjects < 2 {
        return Err(Error::Validation(format!(
            "a cohort needs at least 2 subjects, got {}",
            cfg.n_subjects
        )));
    }
    let fs = 250.0;
    let freqs = target_freqs(fs);
    let mean_log_f = freqs.iter().map(|f| f.log10()).sum::<f64>() / freqs.len() as f64;
    let specs = (0..cfg.n_subjects)
        .map(|i| {
            let seed = derive_seed(master_seed, "subject", i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "spec", 0));
            let beta = uniform(&mut rng, cfg.beta_range);
            let offset = beta * mean_log_f + uniform(&mut rng, cfg.offset_margin);
            let peaks = vec![
                SpectralPeak {
                    center_hz: uniform(&mut rng, cfg.beta_peak_hz),
                    height_log10: uniform(&mut rng, cfg.beta_peak_height),
                    width_hz: uniform(&mut rng, cfg.peak_width_hz),
                },
                SpectralPeak {
                    center_hz: uniform(&mut rng, cfg.gamma_peak_hz),
                    height_log10: uniform(&mut rng, cfg.gamma_peak_height),
                    width_hz: uniform(&mut rng, cfg.peak_width_hz),
                },
            ];
            let acrophase_hour = uniform(&mut rng, [0.0, 24.0]);
            let label = |band| LabelModel {
                band_hz: band,
                gain: cfg.gain,
                noise_sd: cfg.noise_sd,
                driver_sd: cfg.driver_sd,
            };
            SubjectSpec {
                subject_id: format!("S{:02}", i + 1),
                fs_hz: fs,
                start_unix_s: cfg.start_unix_s,
                timezone_offset_s: cfg.timezone_offset_s,
                days: cfg.days,
                spectrum: AperiodicModel { beta, offset, peaks },
                circadian: Circadian {
                    band_hz: cfg.bradykinesia_band_hz,
                    depth: cfg.circadian_depth,
                    acrophase_hour,
                },
                labels: [label(cfg.bradykinesia_band_hz), label(cfg.dyskinesia_band_hz)],
                seed,
            }
        })
        .collect::<Vec<_>>();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub type SynthDataset = Vec<SynthSubject>;

/// Render every subject of the default cohort in memory.
pub fn default_cohort(n_subjects: usize, days: f64, master_seed: u64) -> Result<SynthDataset> {
    let cfg = CohortConfig {
        n_subjects,
        days,
        ..CohortConfig::default()
    };
    cohort_specs(&cfg, master_seed)?.iter().map(synth_subject).collect()
}

/// Local hour ordinal of each window start.
pub fn window_hours(spec: &SubjectSpec) -> Vec<u8> {
    (0..spec.n_windows())
        .map(|w| hour_feature(spec.start_unix_s + w as i64 * LABEL_INTERVAL_S, spec.timezone_offset_s))
        .collect()
}
