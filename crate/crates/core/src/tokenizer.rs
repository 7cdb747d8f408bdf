//! Recordings to tokens: one token per 2-minute window (log10 Welch spectrum
//! over the non-DC, non-Nyquist bins plus the local hour of day), grouped
//! into gap-free 15-token sequences with per-token symptom labels.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{log_power_slice, WelchConfig, WelchEstimator};
use crate::tensor::Matrix;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symptom {
    Bradykinesia,
    Dyskinesia,
}

impl Symptom {
    pub const ALL: [Symptom; 2] = [Symptom::Bradykinesia, Symptom::Dyskinesia];

    pub fn index(self) -> usize {
        match self {
            Symptom::Bradykinesia => 0,
            Symptom::Dyskinesia => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Symptom::Bradykinesia => "bradykinesia",
            Symptom::Dyskinesia => "dyskinesia",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Symptom::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::UnknownSymptom(name.to_string()))
    }
}

impl fmt::Display for Symptom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Continuous single-channel recording. Missing samples are stored as NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub fs_hz: f64,
    pub start_unix_s: i64,
    pub timezone_offset_s: i64,
    pub samples: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub t_unix_s: i64,
    pub bradykinesia: f64,
    pub dyskinesia: f64,
}

impl LabelRow {
    pub fn values(&self) -> [f64; 2] {
        [self.bradykinesia, self.dyskinesia]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub window_s: i64,
    pub tokens_per_sequence: usize,
    /// Largest tolerated distance between a label timestamp and a window start.
    pub label_tolerance_s: i64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            window_s: 120,
            tokens_per_sequence: 15,
            label_tolerance_s: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub features: Vec<f64>,
    pub t_start_unix_s: i64,
    pub subject_id: String,
}

impl Token {
    pub fn hour(&self) -> f64 {
        *self.features.last().expect("token has features")
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.features[..self.features.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub subject_id: String,
    pub tokens: Vec<Token>,
    /// One `[bradykinesia, dyskinesia]` pair per token.
    pub labels: Option<Vec<[f64; 2]>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn feature_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.tokens.iter().map(|t| t.features.as_slice()).collect::<Vec<_>>())
    }

    pub fn label(&self, token: usize, symptom: Symptom) -> Option<f64> {
        self.labels.as_ref().map(|l| l[token][symptom.index()])
    }
}

/// Frequencies of the spectral bins kept in a token: everything except DC
/// and the last (Nyquist) bin.
pub fn token_freqs(cfg: &WelchConfig) -> Vec<f64> {
    let df = cfg.resolution_hz();
    (1..cfg.n_bins() - 1).map(|k| k as f64 * df).collect()
}

/// Token width for a Welch configuration: spectral bins plus the hour.
pub fn token_dim(cfg: &WelchConfig) -> usize {
    cfg.n_bins() - 2 + 1
}

/// Local hour of day, 0..=23.
pub fn hour_feature(t_unix_s: i64, timezone_offset_s: i64) -> u8 {
    ((t_unix_s + timezone_offset_s).rem_euclid(SECONDS_PER_DAY) / 3600) as u8
}

fn window_samples(fs_hz: f64, window_s: i64) -> Result<usize> {
    let n = fs_hz * window_s as f64;
    if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "{window_s} s at {fs_hz} Hz is not a whole number of samples"
        )));
    }
    Ok(n.round() as usize)
}

/// Map labels onto window indices; off-grid or duplicated labels fail.
fn align_labels(
    labels: &[LabelRow],
    start_unix_s: i64,
    n_windows: usize,
    cfg: &TokenizerConfig,
) -> Result<Vec<Option<[f64; 2]>>> {
    let mut slots = vec![None; n_windows];
    for row in labels {
        let offset = row.t_unix_s - start_unix_s;
        let idx = (offset as f64 / cfg.window_s as f64).round() as i64;
        let miss = (offset - idx * cfg.window_s).abs();
        if miss > cfg.label_tolerance_s {
            return Err(Error::Alignment(format!(
                "label at t={} is {miss} s from the nearest window start",
                row.t_unix_s
            )));
        }
        if idx < 0 || idx as usize >= n_windows {
            continue;
        }
        let slot = &mut slots[idx as usize];
        if slot.is_some() {
            return Err(Error::Alignment(format!(
                "two labels map to the window starting at t={}",
                start_unix_s + idx * cfg.window_s
            )));
        }
        *slot = Some(row.values());
    }
    Ok(slots)
}

/// Split a recording into non-overlapping gap-free sequences.
///
/// A window is a gap when it contains a non-finite sample or, when labels
/// are supplied, has no finite label. Any sequence touching a gap is dropped.
pub fn tokenize(
    recording: &Recording,
    labels: Option<&[LabelRow]>,
    welch: &WelchEstimator,
    cfg: &TokenizerConfig,
) -> Result<Vec<Sequence>> {
    let wcfg = welch.config();
    if (wcfg.fs_hz - recording.fs_hz).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "recording sampled at {} Hz but Welch configured for {} Hz",
            recording.fs_hz, wcfg.fs_hz
        )));
    }
    let win = window_samples(recording.fs_hz, cfg.window_s)?;
    let n_windows = recording.samples.len() / win;
    let per_seq = cfg.tokens_per_sequence;
    let label_slots = labels
        .map(|l| align_labels(l, recording.start_unix_s, n_windows, cfg))
        .transpose()?;

    let n_bins = wcfg.n_bins();
    let mut buf = vec![0.0f64; win];
    let mut out = Vec::with_capacity(n_windows / per_seq.max(1));
    if per_seq == 0 {
        return Ok(out);
    }
    'seq: for s in 0..n_windows / per_seq {
        let first = s * per_seq;
        let mut tokens = Vec::with_capacity(per_seq);
        let mut seq_labels = label_slots.as_ref().map(|_| Vec::with_capacity(per_seq));
        for w in first..first + per_seq {
            let chunk = &recording.samples[w * win..(w + 1) * win];
            if chunk.iter().any(|x| !x.is_finite()) {
                continue 'seq;
            }
            if let (Some(slots), Some(acc)) = (&label_slots, seq_labels.as_mut()) {
                match slots[w] {
                    Some(v) if v.iter().all(|x| x.is_finite()) => acc.push(v),
                    _ => continue 'seq,
                }
            }
            for (b, &x) in buf.iter_mut().zip(chunk) {
                *b = f64::from(x);
            }
            let psd = welch.estimate(&buf)?;
            let t_start = recording.start_unix_s + w as i64 * cfg.window_s;
            let mut features = log_power_slice(&psd.power[1..n_bins - 1], wcfg.log_floor);
            features.push(f64::from(hour_feature(t_start, recording.timezone_offset_s)));
            tokens.push(Token {
                features,
                t_start_unix_s: t_start,
                subject_id: recording.subject_id.clone(),
            });
        }
        out.push(Sequence {
            subject_id: recording.subject_id.clone(),
            tokens,
            labels: seq_labels,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted token positions (0-based over tokens; the CLS slot is not a token).
    pub masked_indices: Vec<usize>,
    pub seed_used: u64,
}

/// Number of tokens masked for a ratio, rounding halves up.
pub fn mask_count(ratio: f64, n_tokens: usize) -> usize {
    let r = ratio.clamp(0.0, 1.0);
    // The epsilon keeps 0.3 * 15 on the right side of the .5 boundary.
    ((r * n_tokens as f64 + 0.5 + 1e-9).floor() as usize).min(n_tokens)
}

/// Draw which tokens to hide, uniformly without replacement.
pub fn plan_mask(n_tokens: usize, ratio: f64, seed: u64) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_indices = rand::seq::index::sample(&mut rng, n_tokens, mask_count(ratio, n_tokens)).into_vec();
    masked_indices.sort_unstable();
    MaskPlan {
        masked_indices,
        seed_used: seed,
    }
}

/// Copy of the feature matrix with the planned rows zeroed in full.
pub fn masked_features(seq: &Sequence, plan: &MaskPlan) -> Matrix {
    let mut m = seq.feature_matrix();
    for &t in &plan.masked_indices {
        m.row_mut(t).fill(0.0);
    }
    m
}

/// Zero a random `ratio` of the sequence's tokens. The sequence itself is
/// left untouched.
pub fn apply_mask(seq: &Sequence, ratio: f64, seed: u64) -> (Matrix, MaskPlan) {
    let plan = plan_mask(seq.len(), ratio, seed);
    (masked_features(seq, &plan), plan)
}
