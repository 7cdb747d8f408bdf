#![allow(dead_code)]

use dbsfm::harness::SubjectData;
use dbsfm::spectral::{WelchConfig, WelchEstimator};
use dbsfm::synthgen::{cohort_specs, synth_subject, CohortConfig, SubjectSpec};
use dbsfm::tokenizer::{tokenize, Sequence, Token, TokenizerConfig};

/// Render and tokenize one subject, dropping the raw signal afterwards.
pub fn tokenize_subject(spec: &SubjectSpec) -> SubjectData {
    let welch = WelchEstimator::new(WelchConfig::default()).unwrap();
    let sub = synth_subject(spec).unwrap();
    let sequences = tokenize(&sub.recording, Some(&sub.labels), &welch, &TokenizerConfig::default()).unwrap();
    SubjectData {
        subject_id: spec.subject_id.clone(),
        sequences,
    }
}

pub fn cohort(cfg: &CohortConfig, seed: u64) -> Vec<SubjectData> {
    cohort_specs(cfg, seed).unwrap().iter().map(tokenize_subject).collect()
}

/// Hand-built labeled sequence with `n` tokens of width `dim`.
pub fn toy_sequence(subject: &str, n: usize, dim: usize, t0: i64, f: impl Fn(usize, usize) -> f64) -> Sequence {
    Sequence {
        subject_id: subject.to_string(),
        tokens: (0..n)
            .map(|t| Token {
                features: (0..dim).map(|j| f(t, j)).collect(),
                t_start_unix_s: t0 + 120 * t as i64,
                subject_id: subject.to_string(),
            })
            .collect(),
        labels: Some((0..n).map(|t| [f(t, 0) * 0.5 + 0.1, -f(t, 1)]).collect()),
    }
}
