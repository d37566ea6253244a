//! In-memory dataset, per-resolution clip sets, and paired mini-batches.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use super::manifest::{load_manifest, read_signal, DatasetKind, DatasetManifest};
use super::preprocess::{baseline_correct, binarize_on_scale, keep_last, segment_trial, Clip, ClipKey, LabelSet};
use crate::error::DatasetError;

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Length of the averaged baseline reference window.
    pub ref_seconds: f64,
    /// Keep only the last N seconds of each corrected trial.
    pub keep_last_seconds: Option<f64>,
}

impl PreprocessConfig {
    pub fn for_kind(kind: DatasetKind) -> Self {
        Self {
            ref_seconds: 1.0,
            keep_last_seconds: match kind {
                DatasetKind::Deap => None,
                DatasetKind::Dreamer => Some(60.0),
            },
        }
    }
}

/// One baseline-corrected (subject, stimulus) recording.
#[derive(Clone, Debug)]
pub struct Trial {
    pub subject: usize,
    pub stimulus: usize,
    pub labels: LabelSet,
    /// One `[channels × samples]` signal per modality.
    pub signals: Vec<Arc<[f32]>>,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stimuli: Vec<String>,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn load(path: &Path, cfg: &PreprocessConfig) -> Result<Self, DatasetError> {
        Self::from_manifest(load_manifest(path)?, cfg)
    }

    pub fn from_manifest(manifest: DatasetManifest, cfg: &PreprocessConfig) -> Result<Self, DatasetError> {
        let stimuli = manifest.stimuli();
        let fs = manifest.sample_rate_hz;
        let mut trials = Vec::with_capacity(manifest.trials.len());
        for t in &manifest.trials {
            let rating = |dim: &str| {
                t.ratings.get(dim).copied().ok_or_else(|| {
                    DatasetError::Schema(format!("trial {}/{} has no {dim} rating", t.subject, t.stimulus))
                })
            };
            let labels = LabelSet::new(
                binarize_on_scale(rating("arousal")?, manifest.kind, manifest.rating_scale)?,
                binarize_on_scale(rating("valence")?, manifest.kind, manifest.rating_scale)?,
            );
            let mut signals = Vec::with_capacity(manifest.modalities.len());
            let mut samples = usize::MAX;
            for m in &manifest.modalities {
                let path = manifest.file_path(t, &m.id).expect("validated manifest");
                let raw = read_signal(&path)?;
                let mut sig = baseline_correct(&raw, m.channels, fs, manifest.baseline_seconds, cfg.ref_seconds)?;
                if let Some(keep) = cfg.keep_last_seconds {
                    sig = keep_last(&sig, m.channels, fs, keep)?;
                }
                samples = samples.min(sig.len() / m.channels);
                signals.push(Arc::from(sig));
            }
            trials.push(Trial {
                subject: manifest.subject_index(&t.subject).expect("validated manifest"),
                stimulus: stimuli.iter().position(|s| *s == t.stimulus).expect("listed stimulus"),
                labels,
                signals,
                samples,
            });
        }
        Ok(Self {
            manifest,
            stimuli,
            trials,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.manifest.subjects.len()
    }

    pub fn n_stimuli(&self) -> usize {
        self.stimuli.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.manifest.modalities.len()
    }

    pub fn channels(&self, modality: usize) -> usize {
        self.manifest.modalities[modality].channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.manifest.sample_rate_hz
    }

    /// Segments every trial accepted by `keep` into `t_seconds` clips.
    pub fn segment(&self, t_seconds: f64, keep: impl Fn(&Trial) -> bool) -> Result<ClipSet, DatasetError> {
        let mut trials = Vec::new();
        let mut index = BTreeMap::new();
        for trial in self.trials.iter().filter(|t| keep(t)) {
            let clips = trial
                .signals
                .iter()
                .enumerate()
                .map(|(m, sig)| {
                    segment_trial(
                        sig,
                        self.channels(m),
                        self.sample_rate(),
                        t_seconds,
                        ClipKey {
                            modality: m,
                            subject: trial.subject,
                            stimulus: trial.stimulus,
                        },
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            index.insert((trial.subject, trial.stimulus), trials.len());
            trials.push(SegmentedTrial {
                subject: trial.subject,
                stimulus: trial.stimulus,
                labels: trial.labels,
                clips,
            });
        }
        Ok(ClipSet {
            t_seconds,
            n_modalities: self.n_modalities(),
            trials,
            index,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SegmentedTrial {
    pub subject: usize,
    pub stimulus: usize,
    pub labels: LabelSet,
    /// Clips per modality, in temporal order.
    pub clips: Vec<Vec<Clip>>,
}

impl SegmentedTrial {
    /// Positions available in every modality.
    pub fn positions(&self) -> usize {
        self.clips.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// All clips of one resolution for a subset of trials.
#[derive(Clone, Debug)]
pub struct ClipSet {
    pub t_seconds: f64,
    pub n_modalities: usize,
    pub trials: Vec<SegmentedTrial>,
    index: BTreeMap<(usize, usize), usize>,
}

impl ClipSet {
    pub fn trial(&self, subject: usize, stimulus: usize) -> Option<&SegmentedTrial> {
        self.index.get(&(subject, stimulus)).map(|&i| &self.trials[i])
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.trials
            .iter()
            .map(|t| t.subject)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn stimuli(&self) -> Vec<usize> {
        self.trials
            .iter()
            .map(|t| t.stimulus)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Total clips of one modality.
    pub fn clip_count(&self, modality: usize) -> usize {
        self.trials.iter().map(|t| t.clips[modality].len()).sum()
    }

    /// (stimulus, position) slots recorded for both subjects.
    pub fn shared_slots(&self, a: usize, b: usize) -> Vec<(usize, usize)> {
        let mut slots = Vec::new();
        for ta in self.trials.iter().filter(|t| t.subject == a) {
            if let Some(tb) = self.trial(b, ta.stimulus) {
                let n = ta.positions().min(tb.positions());
                slots.extend((0..n).map(|p| (ta.stimulus, p)));
            }
        }
        slots
    }
}

/// Aligned clips of one modality: row `i` of `a` and row `i` of `b` share a slot.
#[derive(Clone, Debug)]
pub struct ModalityBatch {
    pub modality: usize,
    pub a: Vec<Clip>,
    pub b: Vec<Clip>,
}

#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub subjects: (usize, usize),
    /// (stimulus, position) of each sampled slot before expansion.
    pub slots: Vec<(usize, usize)>,
    pub modalities: Vec<ModalityBatch>,
}

impl MiniBatch {
    /// Clips per subject per modality.
    pub fn m(&self) -> usize {
        self.modalities.first().map_or(0, |mb| mb.a.len())
    }

    pub fn clip_count(&self) -> usize {
        self.modalities.iter().map(|mb| mb.a.len() + mb.b.len()).sum()
    }
}

/// Draws `k` (stimulus, position) slots without replacement and collects the
/// matching clips of both subjects for every modality.
pub fn sample_minibatch<R: Rng + ?Sized>(
    set: &ClipSet,
    subject_a: usize,
    subject_b: usize,
    k: usize,
    rng: &mut R,
) -> Result<MiniBatch, DatasetError> {
    if subject_a == subject_b {
        return Err(DatasetError::IdenticalSubjects(subject_a.to_string()));
    }
    let slots = set.shared_slots(subject_a, subject_b);
    if k == 0 || k > slots.len() {
        return Err(DatasetError::InsufficientClips {
            requested: k,
            available: slots.len(),
        });
    }
    let chosen: Vec<(usize, usize)> = rand::seq::index::sample(rng, slots.len(), k)
        .into_iter()
        .map(|i| slots[i])
        .collect();
    let pick = |subject: usize, m: usize| -> Vec<Clip> {
        chosen
            .iter()
            .map(|&(stim, pos)| set.trial(subject, stim).expect("shared slot").clips[m][pos].clone())
            .collect()
    };
    let modalities = (0..set.n_modalities)
        .map(|m| ModalityBatch {
            modality: m,
            a: pick(subject_a, m),
            b: pick(subject_b, m),
        })
        .collect();
    Ok(MiniBatch {
        subjects: (subject_a, subject_b),
        slots: chosen,
        modalities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::preprocess::Level;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two modalities, three subjects, four stimuli, ten 1 s clips per trial.
    fn toy_set() -> ClipSet {
        let mut trials = Vec::new();
        let mut index = BTreeMap::new();
        for subject in 0..3 {
            for stimulus in 0..4 {
                let clips = (0..2)
                    .map(|m| {
                        let data: Vec<f32> = (0..(m + 1) * 40).map(|v| v as f32).collect();
                        segment_trial(
                            &data,
                            m + 1,
                            4,
                            1.0,
                            ClipKey {
                                modality: m,
                                subject,
                                stimulus,
                            },
                        )
                        .unwrap()
                    })
                    .collect();
                index.insert((subject, stimulus), trials.len());
                trials.push(SegmentedTrial {
                    subject,
                    stimulus,
                    labels: LabelSet::new(Level::High, Level::Low),
                    clips,
                });
            }
        }
        ClipSet {
            t_seconds: 1.0,
            n_modalities: 2,
            trials,
            index,
        }
    }

    #[test]
    fn batch_has_expected_clip_count() {
        let set = toy_set();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_minibatch(&set, 0, 2, 8, &mut rng).unwrap();
        assert_eq!(batch.m(), 8);
        assert_eq!(batch.clip_count(), 32);
    }

    #[test]
    fn slots_align_subjects_and_never_repeat() {
        let set = toy_set();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let batch = sample_minibatch(&set, 1, 0, 12, &mut rng).unwrap();
            let unique: BTreeSet<_> = batch.slots.iter().collect();
            assert_eq!(unique.len(), 12);
            for mb in &batch.modalities {
                for (i, (a, b)) in mb.a.iter().zip(&mb.b).enumerate() {
                    assert_eq!((a.stimulus, a.position), batch.slots[i]);
                    assert_eq!((a.stimulus, a.position), (b.stimulus, b.position));
                    assert_eq!((a.subject, b.subject), (1, 0));
                    assert_eq!(a.modality, mb.modality);
                    assert_eq!(a.variant, 0);
                }
            }
        }
    }

    #[test]
    fn sampling_errors() {
        let set = toy_set();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_minibatch(&set, 1, 1, 4, &mut rng),
            Err(DatasetError::IdenticalSubjects(_))
        ));
        assert!(matches!(
            sample_minibatch(&set, 0, 1, 41, &mut rng),
            Err(DatasetError::InsufficientClips { available: 40, .. })
        ));
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let set = toy_set();
        let a = sample_minibatch(&set, 0, 1, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_minibatch(&set, 0, 1, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.slots, b.slots);
    }
}
