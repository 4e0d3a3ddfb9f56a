//! Plain-text record storage.
//!
//! A manifest lists one subject per line as
//! `subject_id,signal_path,labels_path`; relative paths resolve against
//! the manifest's directory. Signal files hold one float per line, label
//! files one stage token (`W`, `R`, `L`, `D`) per line. Blank lines and
//! lines starting with `#` are ignored everywhere.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::record::{EpochTiming, Record};
use super::stage::SleepStage;
use crate::error::{Error, Result};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    content_lines(&text)
        .map(|(n, l)| {
            let v: f64 = l
                .parse()
                .map_err(|_| parse_err(path, n, format!("invalid sample `{l}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, n, "non-finite sample"));
            }
            Ok(v)
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<SleepStage>> {
    let text = fs::read_to_string(path)?;
    content_lines(&text)
        .map(|(n, l)| {
            SleepStage::from_token(l)
                .ok_or_else(|| parse_err(path, n, format!("unknown label token `{l}`")))
        })
        .collect()
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub signal_path: PathBuf,
    pub labels_path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    content_lines(&text)
        .map(|(n, l)| {
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            let [id, sig, lab] = fields[..] else {
                return Err(parse_err(
                    path,
                    n,
                    format!("expected `subject_id,signal_path,labels_path`, got {} fields", fields.len()),
                ));
            };
            if id.is_empty() {
                return Err(parse_err(path, n, "empty subject id"));
            }
            Ok(ManifestEntry {
                subject_id: id.to_string(),
                signal_path: base.join(sig),
                labels_path: base.join(lab),
            })
        })
        .collect()
}

/// Loads every record listed in a manifest, validating signal/label alignment.
pub fn load_records(manifest: &Path, timing: EpochTiming) -> Result<Vec<Record>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let signal = read_signal(&e.signal_path)?;
            let labels = read_labels(&e.labels_path)?;
            Record::new(e.subject_id, timing, signal, labels)
        })
        .collect()
}

fn write_lines<I, T>(path: &Path, items: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: std::fmt::Display,
{
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        writeln!(out, "{item}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[SleepStage]) -> Result<()> {
    write_lines(path, labels.iter().map(|s| s.token()))
}

/// Writes `<id>.signal.csv`, `<id>.labels.csv` per record and a
/// `manifest.csv` into `dir`; returns the manifest path.
pub fn write_records(dir: &Path, records: &[Record]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for r in records {
        let sig = format!("{}.signal.csv", r.subject_id());
        let lab = format!("{}.labels.csv", r.subject_id());
        write_lines(&dir.join(&sig), r.signal())?;
        write_labels(&dir.join(&lab), r.labels())?;
        manifest.push_str(&format!("{},{sig},{lab}\n", r.subject_id()));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}
