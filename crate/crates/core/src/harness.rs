//! Leave-one-subject-out evaluation: per-fold pre-training and fine-tuning
//! with the held-out subject fully excluded, Pearson scoring, result files
//! and embedding export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::seed::derive_seed;
use crate::tokenizer::{Sequence, Symptom};
use crate::training::{embed_sequences, finetune, predict_tokens, pretrain, FinetuneConfig, PretrainConfig, TrainReport};

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    if !(sxx.is_finite() && syy.is_finite() && sxy.is_finite()) {
        return Err(Error::numeric("pearson_r"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// All tokenized sequences of one subject.
#[derive(Clone, Debug)]
pub struct SubjectData {
    pub subject_id: String,
    pub sequences: Vec<Sequence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub symptoms: Vec<Symptom>,
    /// Repeat fine-tuning and scoring on a copy of the dataset whose labels
    /// are shuffled within every subject, held-out subject included.
    pub permutation_control: bool,
    pub batch_size_eval: usize,
    /// Restrict to these held-out subjects; empty means all.
    pub folds: Vec<String>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            symptoms: Symptom::ALL.to_vec(),
            permutation_control: false,
            batch_size_eval: 64,
            folds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LosoSetup<'a> {
    pub model: &'a ModelConfig,
    pub freqs: &'a [f64],
    pub pretrain: &'a PretrainConfig,
    pub finetune: &'a FinetuneConfig,
    pub cv: &'a CvConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPrediction {
    pub t_unix_s: i64,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymptomResult {
    pub symptom: Symptom,
    /// `None` when undefined (constant predictions or labels).
    pub r: Option<f64>,
    pub r_permuted: Option<f64>,
    pub finetune: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out_subject: String,
    pub symptoms: Vec<SymptomResult>,
    /// Per held-out token, values ordered as `symptoms`.
    pub series: Vec<TokenPrediction>,
    pub pretrain: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FoldOutcome {
    Ok(FoldResult),
    Failed { held_out_subject: String, error: String },
}

impl FoldOutcome {
    pub fn subject(&self) -> &str {
        match self {
            FoldOutcome::Ok(r) => &r.held_out_subject,
            FoldOutcome::Failed { held_out_subject, .. } => held_out_subject,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymptomStats {
    pub symptom: Symptom,
    pub mean_r: Option<f64>,
    /// Sample standard deviation (n - 1) over folds with a defined r.
    pub std_r: Option<f64>,
    pub n_defined: usize,
    pub mean_abs_r_permuted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldOutcome>,
    pub stats: Vec<SymptomStats>,
    pub n_failed: usize,
}

/// Everything trained for one fold.
#[derive(Clone, Debug)]
pub struct FoldModels {
    pub pretrained: ParamStore,
    pub pretrain_report: TrainReport,
    /// Fine-tuned parameters per symptom.
    pub heads: Vec<(Symptom, ParamStore, TrainReport)>,
    /// Heads fine-tuned on the label-shuffled copy. Pre-training reads no
    /// labels, so the shuffled run shares `pretrained`.
    pub permuted_heads: Vec<(Symptom, ParamStore)>,
}

/// Shuffle label rows across all tokens of each subject independently.
pub fn permute_labels(sequences: &[Sequence], seed: u64) -> Vec<Sequence> {
    let mut out = sequences.to_vec();
    let mut subjects: Vec<String> = out.iter().map(|s| s.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    for subj in subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("permute:{subj}"), 0));
        let mut pool: Vec<[f64; 2]> = out
            .iter()
            .filter(|s| s.subject_id == subj)
            .filter_map(|s| s.labels.as_ref())
            .flatten()
            .copied()
            .collect();
        pool.shuffle(&mut rng);
        let mut it = pool.into_iter();
        for s in out.iter_mut().filter(|s| s.subject_id == subj) {
            if let Some(l) = s.labels.as_mut() {
                for v in l.iter_mut() {
                    *v = it.next().expect("pool sized from the same labels");
                }
            }
        }
    }
    out
}

fn permutation_seed(seed: u64) -> u64 {
    derive_seed(seed, "permutation", 0)
}

fn fold_seed(seed: u64, subject: &str) -> u64 {
    derive_seed(seed, &format!("fold:{subject}"), 0)
}

/// Train the models of the fold that holds out `held_out`. Only the other
/// subjects' sequences are read.
pub fn train_fold(data: &[SubjectData], held_out: &str, setup: &LosoSetup<'_>) -> Result<FoldModels> {
    let train: Vec<Sequence> = data
        .iter()
        .filter(|s| s.subject_id != held_out)
        .flat_map(|s| s.sequences.iter().cloned())
        .collect();
    if train.is_empty() {
        return Err(Error::Validation(format!("no training sequences when holding out {held_out}")));
    }
    let seed = fold_seed(setup.seed, held_out);
    let pre = pretrain(&train, setup.freqs, setup.model, setup.pretrain, derive_seed(seed, "pretrain", 0))?;
    let mut heads = Vec::new();
    let mut permuted_heads = Vec::new();
    let shuffled = setup
        .cv
        .permutation_control
        .then(|| permute_labels(&train, permutation_seed(setup.seed)));
    for &sym in &setup.cv.symptoms {
        let ft_seed = derive_seed(seed, sym.name(), 0);
        let (params, report) = finetune(&pre.params, setup.model, &train, &[sym], setup.finetune, ft_seed)?;
        heads.push((sym, params, report));
        if let Some(shuffled) = &shuffled {
            let (params, _) = finetune(&pre.params, setup.model, shuffled, &[sym], setup.finetune, ft_seed)?;
            permuted_heads.push((sym, params));
        }
    }
    Ok(FoldModels {
        pretrained: pre.params,
        pretrain_report: pre.report,
        heads,
        permuted_heads,
    })
}

fn score(truth: &[f64], pred: &[f64]) -> Result<Option<f64>> {
    match pearson_r(truth, pred) {
        Ok(r) => Ok(Some(r)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Predict every token of the held-out subject and score each symptom.
pub fn evaluate_fold(models: &FoldModels, held_out: &SubjectData, setup: &LosoSetup<'_>) -> Result<FoldResult> {
    let seqs = &held_out.sequences;
    if seqs.is_empty() {
        return Err(Error::Validation(format!("held-out subject {} has no sequences", held_out.subject_id)));
    }
    let bs = setup.cv.batch_size_eval;
    let mut series: Vec<TokenPrediction> = seqs
        .iter()
        .flat_map(|s| s.tokens.iter())
        .map(|t| TokenPrediction {
            t_unix_s: t.t_start_unix_s,
            truth: Vec::new(),
            pred: Vec::new(),
        })
        .collect();
    let mut symptoms = Vec::new();
    for (sym, params, report) in &models.heads {
        let truth = seqs
            .iter()
            .flat_map(|s| (0..s.len()).map(move |t| s.label(t, *sym)))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Validation(format!("held-out subject {} lacks labels", held_out.subject_id)))?;
        let pred = predict_tokens(params, setup.model, seqs, *sym, bs)?;
        let r_permuted = match models.permuted_heads.iter().find(|(s, _)| s == sym) {
            Some((_, p)) => {
                let shuffled = permute_labels(seqs, permutation_seed(setup.seed));
                let truth: Vec<f64> = shuffled
                    .iter()
                    .flat_map(|s| (0..s.len()).filter_map(move |t| s.label(t, *sym)))
                    .collect();
                score(&truth, &predict_tokens(p, setup.model, seqs, *sym, bs)?)?
            }
            None => None,
        };
        for ((row, t), p) in series.iter_mut().zip(&truth).zip(&pred) {
            row.truth.push(*t);
            row.pred.push(*p);
        }
        symptoms.push(SymptomResult {
            symptom: *sym,
            r: score(&truth, &pred)?,
            r_permuted,
            finetune: report.clone(),
        });
    }
    Ok(FoldResult {
        held_out_subject: held_out.subject_id.clone(),
        symptoms,
        series,
        pretrain: models.pretrain_report.clone(),
    })
}

fn run_fold(data: &[SubjectData], held_out: &SubjectData, setup: &LosoSetup<'_>) -> FoldOutcome {
    match train_fold(data, &held_out.subject_id, setup).and_then(|m| evaluate_fold(&m, held_out, setup)) {
        Ok(r) => FoldOutcome::Ok(r),
        Err(e) => FoldOutcome::Failed {
            held_out_subject: held_out.subject_id.clone(),
            error: e.to_string(),
        },
    }
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Per-symptom statistics over folds with a defined r.
pub fn summarize(folds: Vec<FoldOutcome>, symptoms: &[Symptom]) -> CvSummary {
    let stats = symptoms
        .iter()
        .map(|&sym| {
            let results = || {
                folds.iter().filter_map(|f| match f {
                    FoldOutcome::Ok(r) => r.symptoms.iter().find(|s| s.symptom == sym),
                    FoldOutcome::Failed { .. } => None,
                })
            };
            let rs: Vec<f64> = results().filter_map(|s| s.r).collect();
            let perm: Vec<f64> = results().filter_map(|s| s.r_permuted.map(f64::abs)).collect();
            let (mean_r, std_r) = mean_std(&rs);
            SymptomStats {
                symptom: sym,
                mean_r,
                std_r,
                n_defined: rs.len(),
                mean_abs_r_permuted: mean_std(&perm).0,
            }
        })
        .collect();
    let n_failed = folds.iter().filter(|f| matches!(f, FoldOutcome::Failed { .. })).count();
    CvSummary { folds, stats, n_failed }
}

/// Leave-one-subject-out cross-validation. Failed folds are recorded and
/// the rest continue; results are ordered as `data`. `jobs > 1` runs folds
/// on that many threads with identical results.
pub fn run_loso(data: &[SubjectData], setup: &LosoSetup<'_>, jobs: usize) -> Result<CvSummary> {
    if data.len() < 2 {
        return Err(Error::Validation(format!("cross-validation needs at least 2 subjects, got {}", data.len())));
    }
    let mut ids: Vec<&str> = data.iter().map(|s| s.subject_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate subject ids".into()));
    }
    if let Some(f) = setup.cv.folds.iter().find(|f| !ids.contains(&f.as_str())) {
        return Err(Error::Validation(format!("fold subject `{f}` not in dataset")));
    }
    let held: Vec<&SubjectData> = data
        .iter()
        .filter(|s| setup.cv.folds.is_empty() || setup.cv.folds.contains(&s.subject_id))
        .collect();

    let jobs = jobs.clamp(1, held.len());
    let folds = if jobs == 1 {
        held.iter().map(|h| run_fold(data, h, setup)).collect()
    } else {
        let mut slots: Vec<Option<FoldOutcome>> = vec![None; held.len()];
        std::thread::scope(|scope| {
            for (t, chunk) in slots.chunks_mut(held.len().div_ceil(jobs)).enumerate() {
                let start = t * held.len().div_ceil(jobs);
                let held = &held;
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_fold(data, held[start + i], setup));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every fold ran")).collect()
    };
    Ok(summarize(folds, &setup.cv.symptoms))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::DataFormat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `folds.csv`, `predictions_{subject}.csv` and `summary.json`.
pub fn write_cv_outputs(summary: &CvSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("folds.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["subject", "symptom", "status", "r", "r_permuted", "pretrain_epochs", "finetune_epochs"])
        .map_err(|e| csv_err(&path, e))?;
    for f in &summary.folds {
        match f {
            FoldOutcome::Ok(r) => {
                for s in &r.symptoms {
                    w.write_record([
                        r.held_out_subject.clone(),
                        s.symptom.name().to_string(),
                        "ok".into(),
                        opt(s.r),
                        opt(s.r_permuted),
                        r.pretrain.epochs_run.to_string(),
                        s.finetune.epochs_run.to_string(),
                    ])
                    .map_err(|e| csv_err(&path, e))?;
                }
            }
            FoldOutcome::Failed { held_out_subject, .. } => {
                for s in &summary.stats {
                    w.write_record([
                        held_out_subject.as_str(),
                        s.symptom.name(),
                        "failed",
                        "",
                        "",
                        "",
                        "",
                    ])
                    .map_err(|e| csv_err(&path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    for f in &summary.folds {
        let FoldOutcome::Ok(r) = f else { continue };
        let path = dir.join(format!("predictions_{}.csv", r.held_out_subject));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec!["timestamp".to_string()];
        for s in &r.symptoms {
            header.push(format!("{}_true", s.symptom.name()));
            header.push(format!("{}_pred", s.symptom.name()));
        }
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for row in &r.series {
            let mut rec = vec![row.t_unix_s.to_string()];
            for (t, p) in row.truth.iter().zip(&row.pred) {
                rec.push(t.to_string());
                rec.push(p.to_string());
            }
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// One CSV row per token (and optionally per CLS slot): subject_id,
/// timestamp, position, d_model embedding values, then labels when known.
/// Returns the number of data rows written.
pub fn export_embeddings<W: Write>(
    params: &ParamStore,
    cfg: &ModelConfig,
    sequences: &[Sequence],
    include_cls: bool,
    out: W,
) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id".to_string(), "timestamp".into(), "position".into()];
    header.extend((0..cfg.d_model).map(|i| format!("e{i}")));
    header.extend(Symptom::ALL.iter().map(|s| s.name().to_string()));
    let werr = |e: csv::Error| Error::Validation(format!("writing embeddings: {e}"));
    w.write_record(&header).map_err(werr)?;
    let mut rows = 0;
    for chunk in sequences.chunks(64) {
        let emb = embed_sequences(params, cfg, chunk, chunk.len())?;
        for (seq, m) in chunk.iter().zip(&emb) {
            let first = seq.tokens.first().map_or(0, |t| t.t_start_unix_s);
            if include_cls {
                let mut rec = vec![seq.subject_id.clone(), first.to_string(), "CLS".into()];
                rec.extend(m.row(0).iter().map(|v| v.to_string()));
                rec.extend(Symptom::ALL.iter().map(|_| String::new()));
                w.write_record(&rec).map_err(werr)?;
                rows += 1;
            }
            for (t, tok) in seq.tokens.iter().enumerate() {
                let mut rec = vec![seq.subject_id.clone(), tok.t_start_unix_s.to_string(), t.to_string()];
                rec.extend(m.row(t + 1).iter().map(|v| v.to_string()));
                rec.extend(Symptom::ALL.iter().map(|&s| opt(seq.label(t, s))));
                w.write_record(&rec).map_err(werr)?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::Validation(format!("writing embeddings: {e}")))?;
    Ok(rows)
}
