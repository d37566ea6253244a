//! Five-fold mini-batch expansion: scaling, fixed-SNR Gaussian noise, and
//! their combination, with optional channel permutation and time flip.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Clip, MiniBatch, ModalityBatch};
use crate::error::{DatasetError, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub scale_low: [f64; 2],
    pub scale_high: [f64; 2],
    pub snr_db: f64,
    /// Channel permutation replaces the noise variant.
    pub enable_cp: bool,
    /// Temporal flip replaces the scale-plus-noise variant.
    pub enable_tf: bool,
    pub expansion: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            scale_low: [0.7, 0.8],
            scale_high: [1.2, 1.3],
            snr_db: 5.0,
            enable_cp: false,
            enable_tf: false,
            expansion: 5,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !range_ok(self.scale_low) || !range_ok(self.scale_high) {
            return Err(Error::Config("scale ranges must be positive and ordered".into()));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        if self.expansion != 1 && self.expansion != 5 {
            return Err(Error::Config(format!(
                "expansion must be 1 (no augmentation) or 5, got {}",
                self.expansion
            )));
        }
        Ok(())
    }
}

pub fn scale_clip(clip: &Clip, factor: f64) -> Clip {
    let f = factor as f32;
    clip.with_data(clip.data.iter().map(|&v| v * f).collect(), clip.variant + 1)
}

/// Mean squared sample value over all channels.
pub fn signal_power(data: &[f32]) -> f64 {
    data.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / data.len() as f64
}

/// Adds zero-mean Gaussian noise with variance `P / 10^(snr_db/10)`.
pub fn add_noise_snr<R: Rng + ?Sized>(clip: &Clip, snr_db: f64, rng: &mut R) -> Result<Clip, DatasetError> {
    let power = signal_power(&clip.data);
    if !(power > 0.0) {
        return Err(DatasetError::ZeroPower);
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let data = clip
        .data
        .iter()
        .map(|&v| (f64::from(v) + noise.sample(rng)) as f32)
        .collect();
    Ok(clip.with_data(data, clip.variant + 1))
}

pub fn channel_permute<R: Rng + ?Sized>(clip: &Clip, rng: &mut R) -> Clip {
    let mut order: Vec<usize> = (0..clip.channels).collect();
    order.shuffle(rng);
    let data = order.iter().flat_map(|&c| clip.channel(c).iter().copied()).collect();
    clip.with_data(data, clip.variant + 1)
}

pub fn time_flip(clip: &Clip) -> Clip {
    let data = (0..clip.channels)
        .flat_map(|c| clip.channel(c).iter().rev().copied())
        .collect();
    clip.with_data(data, clip.variant + 1)
}

fn variant<R: Rng + ?Sized>(clip: &Clip, v: usize, policy: &AugmentPolicy, rng: &mut R) -> Result<Clip> {
    let draw = |range: [f64; 2], rng: &mut R| {
        if range[0] == range[1] {
            range[0]
        } else {
            rng.random_range(range[0]..range[1])
        }
    };
    let out = match v {
        0 => clip.clone(),
        1 => scale_clip(clip, draw(policy.scale_low, rng)),
        2 => scale_clip(clip, draw(policy.scale_high, rng)),
        3 if policy.enable_cp => channel_permute(clip, rng),
        3 => add_noise_snr(clip, policy.snr_db, rng)?,
        4 if policy.enable_tf => time_flip(clip),
        _ => {
            let range = if rng.random_bool(0.5) {
                policy.scale_low
            } else {
                policy.scale_high
            };
            let scaled = scale_clip(clip, draw(range, rng));
            add_noise_snr(&scaled, policy.snr_db, rng)?
        }
    };
    Ok(Clip { variant: v, ..out })
}

/// Replaces each slot `i` with slots `5i..5i+5` holding variants 0–4.
///
/// Subjects A and B receive the same variant kinds at the same index, with
/// independent random draws per clip.
pub fn expand_batch<R: Rng + ?Sized>(batch: &MiniBatch, policy: &AugmentPolicy, rng: &mut R) -> Result<MiniBatch> {
    policy.validate()?;
    let e = policy.expansion;
    if e == 1 {
        return Ok(batch.clone());
    }
    let mut modalities = Vec::with_capacity(batch.modalities.len());
    for mb in &batch.modalities {
        if let Some(c) = mb.a.iter().chain(&mb.b).find(|c| c.variant != 0) {
            return Err(Error::InvalidArgument(format!(
                "batch already augmented (variant {} present)",
                c.variant
            )));
        }
        let mut a = Vec::with_capacity(mb.a.len() * e);
        let mut b = Vec::with_capacity(mb.b.len() * e);
        for (ca, cb) in mb.a.iter().zip(&mb.b) {
            for v in 0..e {
                a.push(variant(ca, v, policy, rng)?);
                b.push(variant(cb, v, policy, rng)?);
            }
        }
        modalities.push(ModalityBatch {
            modality: mb.modality,
            a,
            b,
        });
    }
    Ok(MiniBatch {
        subjects: batch.subjects,
        slots: batch.slots.iter().flat_map(|&s| std::iter::repeat_n(s, e)).collect(),
        modalities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{segment_trial, ClipKey};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(channels: usize, samples: usize, f: impl Fn(usize) -> f32) -> Clip {
        let data: Vec<f32> = (0..channels * samples).map(f).collect();
        let key = ClipKey {
            modality: 0,
            subject: 0,
            stimulus: 0,
        };
        segment_trial(&data, channels, samples as u32, 1.0, key)
            .unwrap()
            .remove(0)
    }

    fn batch(k: usize) -> MiniBatch {
        let mk = |subject: usize| -> Vec<Clip> {
            (0..k)
                .map(|i| Clip {
                    subject,
                    stimulus: i,
                    ..clip(3, 16, |j| ((j * 7 + i) % 11) as f32 - 5.0)
                })
                .collect()
        };
        MiniBatch {
            subjects: (0, 1),
            slots: (0..k).map(|i| (i, 0)).collect(),
            modalities: vec![ModalityBatch {
                modality: 0,
                a: mk(0),
                b: mk(1),
            }],
        }
    }

    #[test]
    fn scaling_basics() {
        let c = clip(2, 8, |i| i as f32 - 3.5);
        assert_eq!(scale_clip(&c, 1.0).data, c.data);
        let ones = clip(1, 4, |_| 1.0);
        assert!(scale_clip(&ones, 0.5).data.iter().all(|&v| v == 0.5));
        let back = scale_clip(&scale_clip(&c, 0.73), 1.0 / 0.73);
        for (x, y) in back.data.iter().zip(c.data.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn unit_power_noise_variance() {
        // Alternating ±1 has unit power; 5 dB gives σ² = 10^(−0.5).
        let c = clip(1, 200_000, |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let noisy = add_noise_snr(&c, 5.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let var: f64 = noisy
            .data
            .iter()
            .zip(c.data.iter())
            .map(|(&n, &s)| f64::from(n - s).powi(2))
            .sum::<f64>()
            / c.data.len() as f64;
        assert!((var - 10f64.powf(-0.5)).abs() < 0.005, "{var}");
    }

    #[test]
    fn zero_clip_has_no_snr() {
        let c = clip(2, 4, |_| 0.0);
        assert!(matches!(
            add_noise_snr(&c, 5.0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DatasetError::ZeroPower)
        ));
    }

    #[test]
    fn flip_and_permute() {
        let c = clip(4, 6, |i| i as f32);
        assert_eq!(time_flip(&time_flip(&c)).data, c.data);
        assert_eq!(time_flip(&c).channel(0), &[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        let p = channel_permute(&c, &mut ChaCha8Rng::seed_from_u64(9));
        let mut before: Vec<Vec<f32>> = (0..4).map(|k| c.channel(k).to_vec()).collect();
        let mut after: Vec<Vec<f32>> = (0..4).map(|k| p.channel(k).to_vec()).collect();
        before.sort_by(|x, y| x.partial_cmp(y).unwrap());
        after.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(before, after);
        let single = clip(1, 5, |i| i as f32);
        assert_eq!(
            channel_permute(&single, &mut ChaCha8Rng::seed_from_u64(2)).data,
            single.data
        );
    }

    #[test]
    fn expansion_is_fivefold_and_aligned() {
        let input = batch(8);
        let out = expand_batch(&input, &AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(out.m(), 40);
        assert_eq!(out.clip_count(), 5 * input.clip_count());
        let mb = &out.modalities[0];
        for (idx, (a, b)) in mb.a.iter().zip(&mb.b).enumerate() {
            assert_eq!(a.variant, idx % 5);
            assert_eq!(b.variant, idx % 5);
            assert_eq!((a.stimulus, a.position), (b.stimulus, b.position));
            assert_eq!(out.slots[idx], input.slots[idx / 5]);
        }
        for i in 0..8 {
            let orig = &input.modalities[0].a[i];
            assert_eq!(mb.a[5 * i].data, orig.data);
            for v in [1, 2] {
                let scaled = &mb.a[5 * i + v];
                assert!(scaled
                    .data
                    .iter()
                    .zip(orig.data.iter())
                    .all(|(&s, &o)| s.signum() == o.signum() || o == 0.0));
            }
        }
    }

    #[test]
    fn draws_differ_between_subjects() {
        // Identical inputs for A and B still receive independent factors.
        let mut input = batch(2);
        input.modalities[0].b = input.modalities[0].a.clone();
        let out = expand_batch(&input, &AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mb = &out.modalities[0];
        assert_eq!(mb.a[0].data, mb.b[0].data);
        assert_ne!(mb.a[1].data, mb.b[1].data);
    }

    #[test]
    fn expansion_is_reproducible() {
        let input = batch(3);
        let policy = AugmentPolicy {
            enable_cp: true,
            enable_tf: true,
            ..AugmentPolicy::default()
        };
        let x = expand_batch(&input, &policy, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let y = expand_batch(&input, &policy, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        for (p, q) in x.modalities[0].a.iter().zip(&y.modalities[0].a) {
            assert_eq!(p.data, q.data);
        }
        assert_eq!(x.modalities[0].a[4].data, time_flip(&input.modalities[0].a[0]).data);
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let input = batch(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugmentPolicy {
            expansion: 3,
            ..AugmentPolicy::default()
        };
        assert!(expand_batch(&input, &bad, &mut rng).is_err());
        let once = expand_batch(&input, &AugmentPolicy::default(), &mut rng).unwrap();
        assert!(expand_batch(&once, &AugmentPolicy::default(), &mut rng).is_err());
        let identity = AugmentPolicy {
            expansion: 1,
            ..AugmentPolicy::default()
        };
        assert_eq!(expand_batch(&input, &identity, &mut rng).unwrap().m(), 2);
    }
}
