//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json               {"format_version": 1, "subjects": [..]}
//! <root>/<subject>/signal.f32le      little-endian f32 samples, NaN marks a gap
//! <root>/<subject>/meta.json         {subject_id, fs_hz, start_unix_s, timezone_offset_s, n_samples}
//! <root>/<subject>/labels.csv        t_unix_s,bradykinesia,dyskinesia (optional)
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dbsfm::tokenizer::{LabelRow, Recording};
use dbsfm::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub subjects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectMeta {
    pub subject_id: String,
    pub fs_hz: f64,
    pub start_unix_s: i64,
    pub timezone_offset_s: i64,
    pub n_samples: usize,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::DataFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| bad(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| bad(path, e.to_string()))
}

pub fn write_manifest(root: &Path, subjects: &[String]) -> Result<()> {
    fs::create_dir_all(root).map_err(io(root))?;
    write_json(
        &root.join("manifest.json"),
        &Manifest {
            format_version: FORMAT_VERSION,
            subjects: subjects.to_vec(),
        },
    )
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let path = root.join("manifest.json");
    let m: Manifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(bad(&path, format!("unsupported format_version {}", m.format_version)));
    }
    Ok(m)
}

pub fn subject_dir(root: &Path, subject: &str) -> PathBuf {
    root.join(subject)
}

pub fn write_subject(root: &Path, recording: &Recording, labels: Option<&[LabelRow]>) -> Result<()> {
    let dir = subject_dir(root, &recording.subject_id);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let path = dir.join("signal.f32le");
    let mut w = BufWriter::new(File::create(&path).map_err(io(&path))?);
    for x in &recording.samples {
        w.write_all(&x.to_le_bytes()).map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    write_json(
        &dir.join("meta.json"),
        &SubjectMeta {
            subject_id: recording.subject_id.clone(),
            fs_hz: recording.fs_hz,
            start_unix_s: recording.start_unix_s,
            timezone_offset_s: recording.timezone_offset_s,
            n_samples: recording.samples.len(),
        },
    )?;
    if let Some(labels) = labels {
        let path = dir.join("labels.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| bad(&path, e.to_string()))?;
        w.write_record(["t_unix_s", "bradykinesia", "dyskinesia"])
            .map_err(|e| bad(&path, e.to_string()))?;
        for l in labels {
            w.write_record([l.t_unix_s.to_string(), l.bradykinesia.to_string(), l.dyskinesia.to_string()])
                .map_err(|e| bad(&path, e.to_string()))?;
        }
        w.flush().map_err(io(&path))?;
    }
    Ok(())
}

pub fn read_recording(root: &Path, subject: &str) -> Result<Recording> {
    let dir = subject_dir(root, subject);
    let meta_path = dir.join("meta.json");
    let meta: SubjectMeta = read_json(&meta_path)?;
    if meta.subject_id != subject {
        return Err(bad(&meta_path, format!("subject_id `{}` does not match directory", meta.subject_id)));
    }
    let path = dir.join("signal.f32le");
    let bytes = fs::read(&path).map_err(io(&path))?;
    if bytes.len() != meta.n_samples * 4 {
        return Err(bad(
            &path,
            format!("{} bytes, expected {} for {} samples", bytes.len(), meta.n_samples * 4, meta.n_samples),
        ));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Recording {
        subject_id: meta.subject_id,
        fs_hz: meta.fs_hz,
        start_unix_s: meta.start_unix_s,
        timezone_offset_s: meta.timezone_offset_s,
        samples,
    })
}

/// Labels of a subject, or `None` when it has no labels file.
pub fn read_labels(root: &Path, subject: &str) -> Result<Option<Vec<LabelRow>>> {
    let path = subject_dir(root, subject).join("labels.csv");
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| bad(&path, e.to_string()))?;
    let headers = r.headers().map_err(|e| bad(&path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t_unix_s", "bradykinesia", "dyskinesia"] {
        return Err(bad(&path, format!("unexpected header {:?}", headers)));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: LabelRow = rec.map_err(|e| bad(&path, e.to_string()))?;
        rows.push(row);
    }
    Ok(Some(rows))
}
