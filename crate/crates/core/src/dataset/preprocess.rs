//! Baseline correction, clip segmentation, and rating binarization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetKind, RatingScale};
use crate::error::DatasetError;

/// One t-second multichannel segment, `[channels × samples]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub data: Arc<[f32]>,
    pub channels: usize,
    pub samples: usize,
    pub modality: usize,
    pub subject: usize,
    pub stimulus: usize,
    /// Clip index within the trial, in temporal order.
    pub position: usize,
    /// Augmentation index; 0 is the unmodified clip.
    pub variant: usize,
    pub t_seconds: f64,
}

impl Clip {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// Copy with new sample values and an updated variant index.
    pub fn with_data(&self, data: Vec<f32>, variant: usize) -> Clip {
        debug_assert_eq!(data.len(), self.data.len());
        Clip {
            data: data.into(),
            variant,
            ..self.clone()
        }
    }
}

/// Identity shared by every clip cut from one (trial, modality).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipKey {
    pub modality: usize,
    pub subject: usize,
    pub stimulus: usize,
}

fn whole_samples(seconds: f64, fs: u32) -> Option<usize> {
    let n = seconds * f64::from(fs);
    ((n - n.round()).abs() < 1e-6 && n >= 0.0).then(|| n.round() as usize)
}

/// Subtracts the averaged pre-stimulus baseline from the stimulus portion.
///
/// The first `baseline_seconds` of each channel are cut into `ref_seconds`
/// chunks whose sample-wise mean forms the reference; the reference is tiled
/// over the remaining samples and subtracted. Returns `[channels × E·fs]`.
pub fn baseline_correct(
    data: &[f32],
    channels: usize,
    fs: u32,
    baseline_seconds: f64,
    ref_seconds: f64,
) -> Result<Vec<f32>, DatasetError> {
    if channels == 0 || !data.len().is_multiple_of(channels) {
        return Err(DatasetError::Shape(format!(
            "{} values do not split into {channels} channels",
            data.len()
        )));
    }
    let total = data.len() / channels;
    let bad = |reason: &str| DatasetError::BadClipLength {
        t_seconds: ref_seconds,
        reason: reason.into(),
    };
    let base = whole_samples(baseline_seconds, fs).ok_or_else(|| bad("baseline is not a whole number of samples"))?;
    let win = whole_samples(ref_seconds, fs)
        .filter(|&w| w > 0)
        .ok_or_else(|| bad("reference window is not a positive whole number of samples"))?;
    if base % win != 0 {
        return Err(bad("baseline length is not a multiple of the reference window"));
    }
    let needed = base + fs as usize;
    if total < needed {
        return Err(DatasetError::TrialTooShort { needed, have: total });
    }
    let chunks = base / win;
    let out_len = total - base;
    let mut out = Vec::with_capacity(channels * out_len);
    let mut reference = vec![0.0f64; win];
    for c in 0..channels {
        let row = &data[c * total..(c + 1) * total];
        reference.iter_mut().for_each(|r| *r = 0.0);
        for k in 0..chunks {
            for (r, &v) in reference.iter_mut().zip(&row[k * win..(k + 1) * win]) {
                *r += f64::from(v);
            }
        }
        if chunks > 0 {
            reference.iter_mut().for_each(|r| *r /= chunks as f64);
        }
        out.extend(
            row[base..]
                .iter()
                .enumerate()
                .map(|(s, &v)| (f64::from(v) - reference[s % win]) as f32),
        );
    }
    Ok(out)
}

/// Keeps only the final `seconds` of each channel.
pub fn keep_last(data: &[f32], channels: usize, fs: u32, seconds: f64) -> Result<Vec<f32>, DatasetError> {
    let total = data.len() / channels;
    let keep = whole_samples(seconds, fs).ok_or_else(|| DatasetError::BadClipLength {
        t_seconds: seconds,
        reason: "not a whole number of samples".into(),
    })?;
    if keep >= total {
        return Ok(data.to_vec());
    }
    Ok((0..channels)
        .flat_map(|c| data[c * total + total - keep..(c + 1) * total].iter().copied())
        .collect())
}

/// Cuts a `[channels × samples]` signal into consecutive non-overlapping
/// `t_seconds` clips. A trailing remainder shorter than one clip is dropped.
pub fn segment_trial(
    data: &[f32],
    channels: usize,
    fs: u32,
    t_seconds: f64,
    key: ClipKey,
) -> Result<Vec<Clip>, DatasetError> {
    let len = whole_samples(t_seconds, fs)
        .filter(|&n| n > 0)
        .ok_or_else(|| DatasetError::BadClipLength {
            t_seconds,
            reason: format!("t·fs must be a positive integer at {fs} Hz"),
        })?;
    if channels == 0 || !data.len().is_multiple_of(channels) {
        return Err(DatasetError::Shape(format!(
            "{} values do not split into {channels} channels",
            data.len()
        )));
    }
    let total = data.len() / channels;
    if total < len {
        return Err(DatasetError::BadClipLength {
            t_seconds,
            reason: format!("trial has only {total} samples"),
        });
    }
    Ok((0..total / len)
        .map(|position| {
            let mut clip = Vec::with_capacity(channels * len);
            for c in 0..channels {
                let start = c * total + position * len;
                clip.extend_from_slice(&data[start..start + len]);
            }
            Clip {
                data: clip.into(),
                channels,
                samples: len,
                modality: key.modality,
                subject: key.subject,
                stimulus: key.stimulus,
                position,
                variant: 0,
                t_seconds,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::Low => 0,
            Level::High => 1,
        }
    }
}

pub fn binarize_rating(rating: f64, kind: DatasetKind) -> Result<Level, DatasetError> {
    binarize_on_scale(rating, kind, kind.default_scale())
}

/// Like [`binarize_rating`] but checks the rating against an explicit scale.
pub fn binarize_on_scale(rating: f64, kind: DatasetKind, scale: RatingScale) -> Result<Level, DatasetError> {
    if !(rating >= scale.min && rating <= scale.max) {
        return Err(DatasetError::RatingOutOfScale {
            rating,
            min: scale.min,
            max: scale.max,
        });
    }
    let high = match kind {
        DatasetKind::Deap => rating >= scale.threshold,
        DatasetKind::Dreamer => rating > scale.threshold,
    };
    Ok(if high { Level::High } else { Level::Low })
}

/// `(high, high) → 0`, `(low, high) → 1`, `(high, low) → 2`, `(low, low) → 3`.
pub fn four_class(arousal: Level, valence: Level) -> usize {
    match (arousal, valence) {
        (Level::High, Level::High) => 0,
        (Level::Low, Level::High) => 1,
        (Level::High, Level::Low) => 2,
        (Level::Low, Level::Low) => 3,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelSet {
    pub arousal: Level,
    pub valence: Level,
    pub four_class: usize,
}

impl LabelSet {
    pub fn new(arousal: Level, valence: Level) -> Self {
        Self {
            arousal,
            valence,
            four_class: four_class(arousal, valence),
        }
    }
}

/// Classification target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Arousal,
    Valence,
    Four,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Arousal | Task::Valence => 2,
            Task::Four => 4,
        }
    }

    pub fn label(self, labels: &LabelSet) -> usize {
        match self {
            Task::Arousal => labels.arousal.index(),
            Task::Valence => labels.valence.index(),
            Task::Four => labels.four_class,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Arousal => "arousal",
            Task::Valence => "valence",
            Task::Four => "four",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arousal" => Ok(Task::Arousal),
            "valence" => Ok(Task::Valence),
            "four" | "four_class" => Ok(Task::Four),
            other => Err(format!("unknown task `{other}` (expected arousal, valence, or four)")),
        }
    }
}
