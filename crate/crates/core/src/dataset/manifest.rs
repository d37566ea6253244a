//! Manifest document and raw trial files.
//!
//! A dataset directory holds `manifest.json` plus one headerless file per
//! (trial, modality) at `<modality>/<subject>_<stimulus>.bin`, containing
//! little-endian `f32` samples in row-major `[channel][sample]` order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Determines the rating binarization rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Ratings 1–9, high iff `rating ≥ 5`.
    Deap,
    /// Ratings 1–5, high iff `rating > 3`.
    Dreamer,
}

impl DatasetKind {
    pub fn default_scale(self) -> RatingScale {
        match self {
            DatasetKind::Deap => RatingScale {
                min: 1.0,
                max: 9.0,
                threshold: 5.0,
            },
            DatasetKind::Dreamer => RatingScale {
                min: 1.0,
                max: 5.0,
                threshold: 3.0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityDescriptor {
    pub id: String,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialDescriptor {
    pub subject: String,
    pub stimulus: String,
    /// Total recorded length including any baseline period.
    pub duration_seconds: f64,
    /// Per-dimension ratings, e.g. `arousal`, `valence`.
    pub ratings: BTreeMap<String, f64>,
    /// Data file per modality id, relative to the manifest directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DatasetKind,
    pub sample_rate_hz: u32,
    /// Pre-stimulus seconds at the start of every trial.
    #[serde(default)]
    pub baseline_seconds: f64,
    pub modalities: Vec<ModalityDescriptor>,
    pub subjects: Vec<String>,
    pub rating_scale: RatingScale,
    pub trials: Vec<TrialDescriptor>,
    /// Directory the relative file paths resolve against. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn modality_index(&self, id: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.id == id)
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s == id)
    }

    /// Stimulus ids in order of first appearance.
    pub fn stimuli(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.trials
            .iter()
            .filter(|t| seen.insert(t.stimulus.clone()))
            .map(|t| t.stimulus.clone())
            .collect()
    }

    pub fn trial_samples(&self, trial: &TrialDescriptor) -> usize {
        (trial.duration_seconds * f64::from(self.sample_rate_hz)).round() as usize
    }

    pub fn file_path(&self, trial: &TrialDescriptor, modality: &str) -> Option<PathBuf> {
        trial.files.get(modality).map(|f| self.root.join(f))
    }

    /// Relative path used by writers: `<modality>/<subject>_<stimulus>.bin`.
    pub fn canonical_file(modality: &str, subject: &str, stimulus: &str) -> String {
        format!("{modality}/{subject}_{stimulus}.bin")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Checks every invariant, including that each data file exists and has
    /// exactly `channels × samples × 4` bytes.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let schema = |m: String| Err(DatasetError::Schema(m));
        if self.sample_rate_hz == 0 {
            return schema("sample_rate_hz must be positive".into());
        }
        if !(self.baseline_seconds >= 0.0 && self.baseline_seconds.is_finite()) {
            return schema("baseline_seconds must be finite and non-negative".into());
        }
        if self.modalities.is_empty() {
            return schema("no modalities".into());
        }
        let mut ids = BTreeSet::new();
        for m in &self.modalities {
            if m.channels == 0 {
                return schema(format!("modality `{}` has zero channels", m.id));
            }
            if !ids.insert(m.id.as_str()) {
                return schema(format!("duplicate modality `{}`", m.id));
            }
        }
        let subjects: BTreeSet<&str> = self.subjects.iter().map(String::as_str).collect();
        if subjects.len() != self.subjects.len() {
            return schema("duplicate subject id".into());
        }
        let s = &self.rating_scale;
        if !(s.min < s.max && s.threshold >= s.min && s.threshold <= s.max) {
            return schema(format!("invalid rating scale {s:?}"));
        }
        let fs = f64::from(self.sample_rate_hz);
        let mut pairs = BTreeSet::new();
        for t in &self.trials {
            if !subjects.contains(t.subject.as_str()) {
                return schema(format!("trial references unknown subject `{}`", t.subject));
            }
            if !pairs.insert((t.subject.as_str(), t.stimulus.as_str())) {
                return schema(format!(
                    "(subject `{}`, stimulus `{}`) appears twice",
                    t.subject, t.stimulus
                ));
            }
            let samples = t.duration_seconds * fs;
            if !(t.duration_seconds > 0.0) || (samples - samples.round()).abs() > 1e-6 {
                return schema(format!(
                    "trial {}/{}: duration {} s is not a whole number of samples",
                    t.subject, t.stimulus, t.duration_seconds
                ));
            }
            for (dim, &r) in &t.ratings {
                if !(r >= s.min && r <= s.max) {
                    return schema(format!(
                        "trial {}/{}: {dim} rating {r} outside [{}, {}]",
                        t.subject, t.stimulus, s.min, s.max
                    ));
                }
            }
            for m in &self.modalities {
                let Some(path) = self.file_path(t, &m.id) else {
                    return schema(format!(
                        "trial {}/{} has no file for modality `{}`",
                        t.subject, t.stimulus, m.id
                    ));
                };
                let meta = fs::metadata(&path).map_err(|_| DatasetError::MissingFile(path.clone()))?;
                let expected = (m.channels * self.trial_samples(t) * 4) as u64;
                if meta.len() != expected {
                    return Err(DatasetError::ByteLength {
                        path,
                        expected,
                        actual: meta.len(),
                    });
                }
            }
            if let Some(extra) = t.files.keys().find(|k| !ids.contains(k.as_str())) {
                return schema(format!(
                    "trial {}/{} lists unknown modality `{extra}`",
                    t.subject, t.stimulus
                ));
            }
        }
        Ok(())
    }
}

/// Reads and validates a manifest. `path` may be the manifest file itself or
/// the dataset directory containing `manifest.json`.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|_| DatasetError::MissingFile(file.clone()))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Schema(e.to_string()))?;
    manifest.root = file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    Ok(manifest)
}

/// Writes `[channels × samples]` row-major values as little-endian `f32`.
pub fn write_signal(path: &Path, data: &[f32]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)
}

pub fn read_signal(path: &Path) -> Result<Vec<f32>, DatasetError> {
    let bytes = fs::read(path).map_err(|_| DatasetError::MissingFile(path.to_path_buf()))?;
    if bytes.len() % 4 != 0 {
        return Err(DatasetError::ByteLength {
            path: path.to_path_buf(),
            expected: (bytes.len() / 4 * 4) as u64,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DatasetError::NonFinite(path.display().to_string()));
    }
    Ok(values)
}
