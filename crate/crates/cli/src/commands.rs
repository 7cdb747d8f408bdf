use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use dbsfm::harness::{export_embeddings, run_loso, write_cv_outputs, CvSummary, LosoSetup, SubjectData};
use dbsfm::model::{load_checkpoint, save_checkpoint};
use dbsfm::spectral::WelchEstimator;
use dbsfm::synthgen::{cohort_specs, synth_subject};
use dbsfm::tokenizer::{token_freqs, tokenize, Sequence};
use dbsfm::training::{check_checkpoint, pretrain};
use dbsfm::{Error, Result};

use crate::config::RunConfig;
use crate::dataset;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PRETRAIN_REPORT: &str = "pretrain_report.csv";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Render the synthetic cohort described by `cfg.synth` into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let specs = cohort_specs(&cfg.synth, cfg.seed)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let mut ids = Vec::with_capacity(specs.len());
    for spec in &specs {
        let sub = synth_subject(spec)?;
        dataset::write_subject(out, &sub.recording, Some(&sub.labels))?;
        ids.push(spec.subject_id.clone());
    }
    dataset::write_manifest(out, &ids)?;
    cfg.echo(out)?;
    Ok(ids)
}

fn data_root(cfg: &RunConfig, data: Option<&Path>) -> Result<PathBuf> {
    data.map(Path::to_path_buf)
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| Error::Config("no dataset given (--data or data_dir)".into()))
}

/// Tokenize every subject of the dataset except those in `exclude`. Files
/// of excluded subjects are never opened.
pub fn load_subjects(cfg: &RunConfig, root: &Path, exclude: &[String], labels: bool) -> Result<Vec<SubjectData>> {
    let manifest = dataset::read_manifest(root)?;
    if let Some(x) = exclude.iter().find(|x| !manifest.subjects.contains(x)) {
        return Err(Error::Config(format!("excluded subject `{x}` is not in the dataset")));
    }
    let welch = WelchEstimator::new(cfg.welch.clone())?;
    let tok = cfg.tokenizer();
    manifest
        .subjects
        .iter()
        .filter(|s| !exclude.contains(s))
        .map(|s| {
            let rec = dataset::read_recording(root, s)?;
            let lab = if labels { dataset::read_labels(root, s)? } else { None };
            let sequences = tokenize(&rec, lab.as_deref(), &welch, &tok)?;
            Ok(SubjectData {
                subject_id: s.clone(),
                sequences,
            })
        })
        .collect()
}

pub fn pretrain_cmd(cfg: &RunConfig, data: Option<&Path>, exclude: &[String], out: &Path) -> Result<usize> {
    let root = data_root(cfg, data)?;
    let subjects = load_subjects(cfg, &root, exclude, false)?;
    let seqs: Vec<Sequence> = subjects.into_iter().flat_map(|s| s.sequences).collect();
    let outcome = pretrain(&seqs, &token_freqs(&cfg.welch), &cfg.model, &cfg.pretrain, cfg.seed)?;
    fs::create_dir_all(out).map_err(io(out))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &cfg.model, &outcome.params)?;
    let path = out.join(PRETRAIN_REPORT);
    fs::write(&path, outcome.report.to_csv()).map_err(io(&path))?;
    let path = out.join("scaling.json");
    let json = serde_json::to_string_pretty(&outcome.scaling).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(&path, json).map_err(io(&path))?;
    cfg.echo(out)?;
    Ok(outcome.report.epochs_run)
}

pub fn cv_cmd(cfg: &RunConfig, data: Option<&Path>, out: &Path, jobs: usize) -> Result<CvSummary> {
    let root = data_root(cfg, data)?;
    let subjects = load_subjects(cfg, &root, &[], true)?;
    let freqs = token_freqs(&cfg.welch);
    let setup = LosoSetup {
        model: &cfg.model,
        freqs: &freqs,
        pretrain: &cfg.pretrain,
        finetune: &cfg.finetune,
        cv: &cfg.cv,
        seed: cfg.seed,
    };
    let summary = run_loso(&subjects, &setup, jobs)?;
    write_cv_outputs(&summary, out)?;
    cfg.echo(out)?;
    Ok(summary)
}

pub fn embed_cmd(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, out: &Path, cls: bool) -> Result<usize> {
    let (model, params) = load_checkpoint(checkpoint)?;
    check_checkpoint(&params, &model)?;
    let cfg = RunConfig { model, ..cfg.clone() };
    cfg.validate()?;
    let root = data_root(&cfg, data)?;
    let seqs: Vec<Sequence> = load_subjects(&cfg, &root, &[], true)?
        .into_iter()
        .flat_map(|s| s.sequences)
        .collect();
    fs::create_dir_all(out).map_err(io(out))?;
    let path = out.join("embeddings.csv");
    let file = File::create(&path).map_err(io(&path))?;
    let rows = export_embeddings(&params, &cfg.model, &seqs, cls, BufWriter::new(file))?;
    cfg.echo(out)?;
    Ok(rows)
}
