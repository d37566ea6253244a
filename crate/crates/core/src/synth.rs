//! Synthetic multi-subject, two-modality recordings with a known shared
//! stimulus-driven latent process.
//!
//! Each stimulus owns a smooth latent trajectory `u(t)` (constant offsets on
//! the first two components plus a sum of slow random sinusoids). A subject
//! observes it through a modality-level mixing matrix plus a subject-specific
//! perturbation, a per-channel DC offset, and white noise at a fixed SNR. The
//! trial starts with a rest period in which the latent is absent, so baseline
//! correction removes the DC offsets. Ratings follow the sign of the mean of
//! latent components 0 (arousal) and 1 (valence).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_signal, DatasetKind, DatasetManifest, ModalityDescriptor, TrialDescriptor, MANIFEST_FILE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_stimuli: usize,
    /// Stimulus period; the written trial adds `baseline_seconds` of rest.
    pub trial_seconds: u32,
    pub baseline_seconds: u32,
    pub fs: u32,
    pub eeg_channels: usize,
    pub pps_channels: usize,
    pub latent_dim: usize,
    /// Scale of the per-subject perturbation of the mixing matrices.
    pub subject_mixing_noise: f64,
    pub observation_snr_db: f64,
    /// Range of the magnitude of the label-carrying latent offsets.
    pub offset_range: [f64; 2],
    /// Standard deviation of the fluctuating part of every latent component.
    pub fluctuation_std: f64,
    pub n_sinusoids: usize,
    /// Frequency band of the latent fluctuations in Hz.
    pub band_hz: [f64; 2],
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_stimuli: 8,
            trial_seconds: 60,
            baseline_seconds: 3,
            fs: 128,
            eeg_channels: 8,
            pps_channels: 2,
            latent_dim: 4,
            subject_mixing_noise: 0.3,
            observation_snr_db: 10.0,
            offset_range: [1.0, 1.5],
            fluctuation_std: 0.5,
            n_sinusoids: 8,
            band_hz: [0.05, 2.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_subjects,
            self.n_stimuli,
            self.trial_seconds as usize,
            self.fs as usize,
            self.eeg_channels,
            self.pps_channels,
            self.n_sinusoids,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("synthetic dataset dimensions must be positive".into()));
        }
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be at least 2".into()));
        }
        if !(self.offset_range[0] >= 0.0 && self.offset_range[0] <= self.offset_range[1]) {
            return Err(Error::Config("offset_range must be ordered and non-negative".into()));
        }
        if !(self.band_hz[0] > 0.0 && self.band_hz[0] < self.band_hz[1]) {
            return Err(Error::Config("band_hz must be an increasing positive range".into()));
        }
        if !(self.observation_snr_db.is_finite() && self.fluctuation_std >= 0.0 && self.subject_mixing_noise >= 0.0) {
            return Err(Error::Config("invalid noise settings".into()));
        }
        Ok(())
    }

    pub fn subject_id(i: usize) -> String {
        format!("s{:02}", i + 1)
    }

    pub fn stimulus_id(i: usize) -> String {
        format!("v{:02}", i + 1)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_STIMULI: u64 = 1;
const STREAM_MIXING: u64 = 2;
const STREAM_TRIAL: u64 = 1 << 32;

/// Latent trajectories `[offsets.len()][samples]` over the stimulus period.
fn latent<R: Rng>(cfg: &SynthConfig, offsets: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
    let n = (cfg.trial_seconds * cfg.fs) as usize;
    let amp = cfg.fluctuation_std * (2.0 / cfg.n_sinusoids as f64).sqrt();
    (0..offsets.len())
        .map(|k| {
            let waves: Vec<(f64, f64)> = (0..cfg.n_sinusoids)
                .map(|_| {
                    let f = rng.random_range(cfg.band_hz[0]..cfg.band_hz[1]);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (f, phase)
                })
                .collect();
            (0..n)
                .map(|s| {
                    let t = s as f64 / f64::from(cfg.fs);
                    offsets[k]
                        + amp
                            * waves
                                .iter()
                                .map(|&(f, p)| (std::f64::consts::TAU * f * t + p).sin())
                                .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Offsets of every stimulus with balanced signs on components 0 and 1.
fn stimulus_offsets<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<Vec<f64>> {
    let mut signs: Vec<(f64, f64)> = (0..cfg.n_stimuli)
        .map(|i| match i % 4 {
            0 => (1.0, 1.0),
            1 => (-1.0, -1.0),
            2 => (1.0, -1.0),
            _ => (-1.0, 1.0),
        })
        .collect();
    signs.shuffle(rng);
    signs
        .into_iter()
        .map(|(a, v)| {
            let mut mag = || {
                if cfg.offset_range[0] == cfg.offset_range[1] {
                    cfg.offset_range[0]
                } else {
                    rng.random_range(cfg.offset_range[0]..cfg.offset_range[1])
                }
            };
            let mut o = vec![0.0; cfg.latent_dim];
            o[0] = a * mag();
            o[1] = v * mag();
            o
        })
        .collect()
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

fn rating(mean: f64) -> f64 {
    5.0 + 3.0 * mean.tanh()
}

/// Writes the dataset container under `dir` and returns its manifest.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let modalities = [("eeg", cfg.eeg_channels), ("pps", cfg.pps_channels)];
    let l = cfg.latent_dim;

    let mut rng = stream(cfg.seed, STREAM_STIMULI);
    let offsets = stimulus_offsets(cfg, &mut rng);

    // Mixing matrices [channels × latent]: shared per modality, perturbed per subject.
    let mut rng = stream(cfg.seed, STREAM_MIXING);
    let base: Vec<Vec<f64>> = modalities
        .iter()
        .map(|&(_, c)| gaussian_matrix(c, l, &mut rng))
        .collect();
    let mut mixing = Vec::new();
    let mut dc = Vec::new();
    for _ in 0..cfg.n_subjects {
        let mut per_mod = Vec::new();
        let mut per_dc = Vec::new();
        for (m, &(_, c)) in modalities.iter().enumerate() {
            let delta = gaussian_matrix(c, l, &mut rng);
            per_mod.push(
                base[m]
                    .iter()
                    .zip(&delta)
                    .map(|(b, d)| b + cfg.subject_mixing_noise * d)
                    .collect::<Vec<f64>>(),
            );
            per_dc.push(
                (0..c)
                    .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<f64>>(),
            );
        }
        mixing.push(per_mod);
        dc.push(per_dc);
    }

    let base_n = (cfg.baseline_seconds * cfg.fs) as usize;
    let stim_n = (cfg.trial_seconds * cfg.fs) as usize;
    let mut trials = Vec::new();
    for s in 0..cfg.n_stimuli {
        let mut rng = stream(cfg.seed, STREAM_STIMULI + 16 + s as u64);
        let u = latent(cfg, &offsets[s], &mut rng);
        let means: Vec<f64> = u.iter().map(|c| c.iter().sum::<f64>() / stim_n as f64).collect();
        let ratings = BTreeMap::from([
            ("arousal".to_string(), rating(means[0])),
            ("valence".to_string(), rating(means[1])),
        ]);
        for subj in 0..cfg.n_subjects {
            let mut rng = stream(cfg.seed, STREAM_TRIAL + (s * cfg.n_subjects + subj) as u64);
            let mut files = BTreeMap::new();
            for (m, &(id, c)) in modalities.iter().enumerate() {
                let a = &mixing[subj][m];
                let clean: Vec<Vec<f64>> = (0..c)
                    .map(|ch| {
                        (0..stim_n)
                            .map(|t| (0..l).map(|k| a[ch * l + k] * u[k][t]).sum::<f64>())
                            .collect()
                    })
                    .collect();
                let power = clean.iter().flatten().map(|v| v * v).sum::<f64>() / (c * stim_n) as f64;
                let sigma = (power / 10f64.powf(cfg.observation_snr_db / 10.0)).sqrt();
                let noise = Normal::new(0.0, sigma).expect("finite sigma");
                let mut data = Vec::with_capacity(c * (base_n + stim_n));
                for (ch, row) in clean.iter().enumerate() {
                    let offset = dc[subj][m][ch];
                    data.extend((0..base_n).map(|_| (offset + noise.sample(&mut rng)) as f32));
                    data.extend(row.iter().map(|v| (offset + v + noise.sample(&mut rng)) as f32));
                }
                let rel =
                    DatasetManifest::canonical_file(id, &SynthConfig::subject_id(subj), &SynthConfig::stimulus_id(s));
                write_signal(&dir.join(&rel), &data)?;
                files.insert(id.to_string(), rel);
            }
            trials.push(TrialDescriptor {
                subject: SynthConfig::subject_id(subj),
                stimulus: SynthConfig::stimulus_id(s),
                duration_seconds: f64::from(cfg.baseline_seconds + cfg.trial_seconds),
                ratings: ratings.clone(),
                files,
            });
        }
    }
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        kind: DatasetKind::Deap,
        sample_rate_hz: cfg.fs,
        baseline_seconds: f64::from(cfg.baseline_seconds),
        modalities: modalities
            .iter()
            .map(|&(id, channels)| ModalityDescriptor {
                id: id.into(),
                channels,
            })
            .collect(),
        subjects: (0..cfg.n_subjects).map(SynthConfig::subject_id).collect(),
        rating_scale: DatasetKind::Deap.default_scale(),
        trials,
        root: dir.to_path_buf(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(manifest)
}
