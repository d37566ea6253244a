//! Contrastive pre-training over all subject pairs, one run per clip length.

use rand::Rng;

use super::optim::{lr_at, Adam};
use super::{merge_into, rng_for, LossCurve, TrialSet};
use crate::augment::expand_batch;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::config::RunConfig;
use crate::contrastive::{cosine_sim, LossToggles, PretrainNet};
use crate::dataset::{sample_minibatch, Clip, ClipSet, Dataset};
use crate::error::{Error, Result};
use crate::nn::BN_MOMENTUM;

/// Pre-trained parameters for every resolution plus loss curves.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub curves: Vec<LossCurve>,
    pub skipped_steps: usize,
}

pub fn network_inputs(data: &Dataset, t_seconds: f64) -> Vec<(String, usize)> {
    data.manifest
        .modalities
        .iter()
        .map(|m| {
            let samples = (t_seconds * f64::from(data.sample_rate())).round() as usize;
            (m.id.clone(), m.channels * samples)
        })
        .collect()
}

/// Fresh network for one resolution in its own store.
pub fn build_pretrain_net<R: Rng + ?Sized>(
    cfg: &RunConfig,
    data: &Dataset,
    t_seconds: f64,
    rng: &mut R,
) -> Result<(ParamStore<f32>, PretrainNet)> {
    let mut store = ParamStore::new();
    let net = PretrainNet::new(
        &mut store,
        t_seconds,
        &network_inputs(data, t_seconds),
        &cfg.encoder,
        &cfg.projector,
        rng,
    )?;
    Ok((store, net))
}

pub fn toggles(cfg: &RunConfig, n_modalities: usize) -> LossToggles {
    LossToggles {
        tcl: cfg.pretrain.use_tcl,
        cmcl: cfg.pretrain.use_cmcl && n_modalities == 2,
    }
}

/// Unordered subject pairs `(a, b)` with `a < b`.
pub fn subject_pairs(subjects: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &a) in subjects.iter().enumerate() {
        for &b in &subjects[i + 1..] {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Mean eval-mode loss over every subject pair of `set`, with a fixed
/// sampling stream so successive epochs see identical batches.
fn validation_loss(
    cfg: &RunConfig,
    net: &PretrainNet,
    store: &ParamStore<f32>,
    set: &ClipSet,
    seed: u64,
) -> Result<Option<f64>> {
    let mut rng = rng_for(seed, 0xA11);
    let policy = cfg.effective_augment();
    let tg = toggles(cfg, set.n_modalities);
    let mut total = 0.0;
    let mut n = 0;
    for (a, b) in subject_pairs(&set.subjects()) {
        let k = cfg.pretrain.k.min(set.shared_slots(a, b).len());
        if k < 2 {
            continue;
        }
        let batch = sample_minibatch(set, a, b, k, &mut rng)?;
        let batch = expand_batch(&batch, &policy, &mut rng)?;
        let mut g = Graph::new(false);
        let loss = net.loss(&mut g, store, &batch, &cfg.loss, tg, &mut rng)?;
        total += f64::from(g.scalar(loss.total));
        n += 1;
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Pre-trains one resolution. Returns the selected parameters and the curve.
pub fn pretrain_resolution(
    cfg: &RunConfig,
    data: &Dataset,
    train: &TrialSet,
    val: &TrialSet,
    t_seconds: f64,
    seed: u64,
) -> Result<(ParamStore<f32>, PretrainNet, LossCurve, usize)> {
    let train_set = data.segment(t_seconds, |t| train.contains(&(t.subject, t.stimulus)))?;
    let val_set = data.segment(t_seconds, |t| val.contains(&(t.subject, t.stimulus)))?;
    let subjects = train_set.subjects();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pre-training needs at least two subjects, split has {}",
            subjects.len()
        )));
    }
    let mut init_rng = rng_for(seed, 1);
    let (mut store, net) = build_pretrain_net(cfg, data, t_seconds, &mut init_rng)?;
    let mut adam = Adam::new(&store, cfg.adam);
    let mut rng = rng_for(seed, 2);
    let policy = cfg.effective_augment();
    let tg = toggles(cfg, data.n_modalities());
    let pairs = subject_pairs(&subjects);
    let epochs = cfg.pretrain.effective_epochs();
    let mut curve = LossCurve::new(format!("pretrain_{t_seconds}s"));
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    for epoch in 0..epochs {
        let lr = lr_at(epoch, epochs, cfg.pretrain.cycles, cfg.pretrain.lr);
        let mut sum = 0.0;
        let mut steps = 0;
        for &(a, b) in &pairs {
            let k = cfg.pretrain.k.min(train_set.shared_slots(a, b).len());
            for _ in 0..cfg.pretrain.batches_per_pair {
                let batch = sample_minibatch(&train_set, a, b, k, &mut rng)?;
                let batch = expand_batch(&batch, &policy, &mut rng)?;
                let mut g = Graph::new(true);
                let loss = net.loss(&mut g, &store, &batch, &cfg.loss, tg, &mut rng)?;
                let value = f64::from(g.scalar(loss.total));
                if !value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "pre-training loss {value} at t = {t_seconds} s, epoch {epoch}, subjects ({a}, {b}), lr {lr:.3e}"
                    )));
                }
                let grads = g.backward(loss.total)?;
                let updates = g.take_bn_updates();
                drop(g);
                if adam.step(&mut store, &grads, lr) {
                    store.apply_bn_updates(&updates, BN_MOMENTUM as f32);
                }
                sum += value;
                steps += 1;
            }
        }
        let train_loss = sum / steps.max(1) as f64;
        let val_loss = validation_loss(cfg, &net, &store, &val_set, seed)?;
        curve.push(epoch, train_loss, val_loss);
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, store.clone()));
                curve.best_epoch = Some(epoch);
            }
        }
    }
    let store = match best {
        Some((_, s)) => s,
        None => {
            curve.best_epoch = epochs.checked_sub(1);
            store
        }
    };
    Ok((store, net, curve, adam.skipped))
}

/// Pre-trains every resolution of the plan on `train` trials.
pub fn pretrain(
    cfg: &RunConfig,
    data: &Dataset,
    train: &TrialSet,
    val: &TrialSet,
    seed: u64,
) -> Result<PretrainOutcome> {
    let mut store = ParamStore::new();
    let mut curves = Vec::new();
    let mut skipped = 0;
    for (r, t) in cfg.plan.resolutions().into_iter().enumerate() {
        let (s, _, curve, sk) = pretrain_resolution(cfg, data, train, val, t, seed.wrapping_add(r as u64 * 7919))?;
        merge_into(&mut store, &s)?;
        curves.push(curve);
        skipped += sk;
    }
    Ok(PretrainOutcome {
        store,
        curves,
        skipped_steps: skipped,
    })
}

/// Projected embeddings (eval mode) of one modality's clips, chunked.
pub fn embed_clips(
    net: &PretrainNet,
    store: &ParamStore<f32>,
    modality: usize,
    clips: &[&Clip],
) -> Result<Tensor<f64>> {
    let mut rows = Vec::new();
    let mut rng = rng_for(0, 0);
    let mut width = 0;
    for chunk in clips.chunks(256) {
        let mut g = Graph::new(false);
        let z = net.embed(&mut g, store, modality, chunk, &mut rng)?;
        width = g.shape(z)[1];
        rows.extend(g.value(z).iter().map(|&v| f64::from(v)));
    }
    Tensor::new(clips.len(), width, rows)
}

/// Mean cosine similarity of positive (same stimulus and position,
/// different subject) and negative (different slot, different subject)
/// projected pairs for one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub positive: f64,
    pub negative: f64,
}

impl Alignment {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

pub fn alignment(net: &PretrainNet, store: &ParamStore<f32>, set: &ClipSet, modality: usize) -> Result<Alignment> {
    let (mut pos, mut neg) = ((0.0, 0usize), (0.0, 0usize));
    for (a, b) in subject_pairs(&set.subjects()) {
        let slots = set.shared_slots(a, b);
        if slots.len() < 2 {
            continue;
        }
        let pick = |s: usize| -> Vec<&Clip> {
            slots
                .iter()
                .map(|&(stim, p)| &set.trial(s, stim).expect("shared slot").clips[modality][p])
                .collect()
        };
        let za = embed_clips(net, store, modality, &pick(a))?;
        let zb = embed_clips(net, store, modality, &pick(b))?;
        for i in 0..slots.len() {
            for j in 0..slots.len() {
                let c = cosine_sim(za.row(i), zb.row(j))?;
                if i == j {
                    pos = (pos.0 + c, pos.1 + 1);
                } else {
                    neg = (neg.0 + c, neg.1 + 1);
                }
            }
        }
    }
    if pos.1 == 0 {
        return Err(Error::InvalidArgument(
            "no subject pair shares two or more slots".into(),
        ));
    }
    Ok(Alignment {
        positive: pos.0 / pos.1 as f64,
        negative: neg.0 / neg.1 as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_enumerate_combinations() {
        assert_eq!(subject_pairs(&[0, 1, 2, 3]).len(), 6);
        assert_eq!(subject_pairs(&[4, 9]), vec![(4, 9)]);
        assert!(subject_pairs(&[1]).is_empty());
    }
}
