use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub label: String,
    pub duration_s: f64,
}

/// A duration that differs from the configured clip length, either as
/// declared in the CSV or as measured from the WAV header.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DurationMismatch {
    /// 1-based data row.
    pub row: usize,
    pub declared_s: f64,
    pub measured_s: f64,
    pub expected_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub mismatches: Vec<DurationMismatch>,
}

#[derive(Clone, Debug, Default)]
pub struct ManifestOptions {
    /// Declared class set. When absent, classes are taken from the file in
    /// order of first appearance.
    pub classes: Option<Vec<String>>,
    /// Configured clip length; enables duration checks.
    pub clip_length_s: Option<f64>,
}

#[derive(Deserialize)]
struct Row {
    path: String,
    label: String,
    duration_s: f64,
}

const DURATION_TOL_S: f64 = 1e-3;

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Class index of every entry.
    pub fn labels(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| self.class_index(&e.label).expect("validated label"))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// Writes `path,label,duration_s` with paths relative to `dir` when possible.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let io = |e: csv::Error| DatasetError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["path", "label", "duration_s"]).map_err(io)?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(dir).unwrap_or(&e.path);
            w.write_record([rel.to_string_lossy().as_ref(), &e.label, &format!("{}", e.duration_s)])
                .map_err(io)?;
        }
        w.flush().map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Parses and validates a `path,label,duration_s` CSV. Every WAV header is
/// opened; durations that disagree with the configured length are reported
/// in [`Manifest::mismatches`] rather than rejected.
pub fn load_manifest(path: &Path, opts: &ManifestOptions) -> Result<Manifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if text.trim().is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| DatasetError::MalformedRow {
        row: 0,
        reason: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "duration_s"] {
        return Err(DatasetError::MalformedRow {
            row: 0,
            reason: format!("expected header path,label,duration_s, got {:?}", headers),
        });
    }

    let mut classes = opts.classes.clone().unwrap_or_default();
    let mut entries = Vec::new();
    let mut mismatches = Vec::new();
    for (i, rec) in reader.deserialize::<Row>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DatasetError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        if !classes.contains(&rec.label) {
            if opts.classes.is_some() {
                return Err(DatasetError::UnknownLabel { row, label: rec.label });
            }
            classes.push(rec.label.clone());
        }
        let wav = dir.join(&rec.path);
        let reader = hound::WavReader::open(&wav).map_err(|e| DatasetError::UnreadableWav {
            path: wav.clone(),
            reason: e.to_string(),
        })?;
        let spec = reader.spec();
        let measured = reader.duration() as f64 / spec.sample_rate as f64;
        if let Some(expected) = opts.clip_length_s {
            if (rec.duration_s - expected).abs() > DURATION_TOL_S || (measured - expected).abs() > DURATION_TOL_S {
                log::warn!("manifest row {row}: duration {measured:.3}s (declared {}s), expected {expected}s", rec.duration_s);
                mismatches.push(DurationMismatch {
                    row,
                    declared_s: rec.duration_s,
                    measured_s: measured,
                    expected_s: expected,
                });
            }
        }
        entries.push(ManifestEntry {
            path: wav,
            label: rec.label,
            duration_s: rec.duration_s,
        });
    }
    if entries.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    Ok(Manifest {
        classes,
        entries,
        mismatches,
    })
}
