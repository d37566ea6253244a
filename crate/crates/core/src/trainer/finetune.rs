//! Supervised fine-tuning of the fusion network and evaluation.

use rand::seq::SliceRandom;

use super::metrics::{argmax_rows, Metrics};
use super::optim::{lr_at, Adam};
use super::{rng_for, LossCurve, TrialSet};
use crate::autodiff::{Graph, ParamStore};
use crate::config::RunConfig;
use crate::dataset::{Clip, ClipSet, Dataset, Task};
use crate::error::{Error, Result};
use crate::fusion::FineTuneNet;
use crate::nn::checkpoint::restore;
use crate::nn::BN_MOMENTUM;

const EVAL_CHUNK: usize = 256;

/// One labelled long clip position of a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub trial: usize,
    pub position: usize,
    pub label: usize,
}

pub fn samples(set: &ClipSet, task: Task) -> Vec<Sample> {
    set.trials
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let label = task.label(&t.labels);
            (0..t.positions()).map(move |position| Sample {
                trial: i,
                position,
                label,
            })
        })
        .collect()
}

fn batch_clips<'s>(set: &'s ClipSet, batch: &[Sample]) -> Vec<Vec<&'s Clip>> {
    (0..set.n_modalities)
        .map(|m| {
            batch
                .iter()
                .map(|s| &set.trials[s.trial].clips[m][s.position])
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub store: ParamStore<f32>,
    pub net: FineTuneNet,
    pub curve: LossCurve,
    pub skipped_steps: usize,
}

pub fn network_inputs(data: &Dataset) -> Vec<(String, usize, u32)> {
    data.manifest
        .modalities
        .iter()
        .map(|m| (m.id.clone(), m.channels, data.sample_rate()))
        .collect()
}

/// Builds the fusion network; encoder weights come from `pretrained` when given.
pub fn build_finetune_net(
    cfg: &RunConfig,
    data: &Dataset,
    pretrained: Option<&ParamStore<f32>>,
    seed: u64,
) -> Result<(ParamStore<f32>, FineTuneNet)> {
    let mut store = ParamStore::new();
    let mut rng = rng_for(seed, 3);
    let net = FineTuneNet::new(
        &mut store,
        &network_inputs(data),
        &cfg.plan,
        &cfg.encoder,
        &cfg.fusion,
        cfg.task.n_classes(),
        &mut rng,
    )?;
    if let Some(archive) = pretrained {
        for prefix in net.encoder_prefixes() {
            restore(&mut store, archive, &format!("{prefix}."))
                .map_err(|e| Error::Checkpoint(format!("missing pre-trained encoder `{prefix}`: {e}")))?;
        }
    }
    if cfg.finetune.freeze_encoders {
        for prefix in net.encoder_prefixes() {
            store.set_frozen(&format!("{prefix}."), true);
        }
    }
    Ok((store, net))
}

/// Mean eval-mode objective over `samples`.
fn eval_loss(net: &FineTuneNet, store: &ParamStore<f32>, set: &ClipSet, samples: &[Sample]) -> Result<f64> {
    let mut rng = rng_for(0, 0);
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let clips = batch_clips(set, chunk);
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let mut g = Graph::new(false);
        let out = net.forward(&mut g, store, &clips, Some(&labels), &mut rng)?;
        total += f64::from(g.scalar(out.loss.expect("labels given"))) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

pub fn finetune(
    cfg: &RunConfig,
    data: &Dataset,
    train: &TrialSet,
    val: &TrialSet,
    pretrained: Option<&ParamStore<f32>>,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let t = cfg.plan.t_long;
    let train_set = data.segment(t, |x| train.contains(&(x.subject, x.stimulus)))?;
    let val_set = data.segment(t, |x| val.contains(&(x.subject, x.stimulus)))?;
    let mut train_samples = samples(&train_set, cfg.task);
    let val_samples = samples(&val_set, cfg.task);
    if train_samples.len() < 2 {
        return Err(Error::InvalidArgument(
            "fine-tuning split has fewer than two samples".into(),
        ));
    }
    let (mut store, net) = build_finetune_net(cfg, data, pretrained, seed)?;
    let mut adam = Adam::new(&store, cfg.adam);
    let mut rng = rng_for(seed, 4);
    let epochs = cfg.finetune.epochs;
    let mut curve = LossCurve::new(format!("finetune_{t}s"));
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    for epoch in 0..epochs {
        let lr = lr_at(epoch, epochs, cfg.finetune.cycles, cfg.finetune.lr);
        train_samples.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for chunk in train_samples.chunks(cfg.finetune.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let clips = batch_clips(&train_set, chunk);
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            let mut g = Graph::new(true);
            let out = net.forward(&mut g, &store, &clips, Some(&labels), &mut rng)?;
            let loss = out.loss.expect("labels given");
            let value = f64::from(g.scalar(loss));
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "fine-tuning loss {value} at epoch {epoch}, lr {lr:.3e}"
                )));
            }
            let grads = g.backward(loss)?;
            let updates = g.take_bn_updates();
            drop(g);
            if adam.step(&mut store, &grads, lr) {
                store.apply_bn_updates(&updates, BN_MOMENTUM as f32);
            }
            sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_loss = if val_samples.is_empty() {
            None
        } else {
            Some(eval_loss(&net, &store, &val_set, &val_samples)?)
        };
        curve.push(epoch, sum / seen.max(1) as f64, val_loss);
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
    Ok(FinetuneOutcome {
        store,
        net,
        curve,
        skipped_steps: adam.skipped,
    })
}

/// Class probabilities `[samples × n_classes]` in eval mode.
pub fn predict(net: &FineTuneNet, store: &ParamStore<f32>, set: &ClipSet, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut rng = rng_for(0, 0);
    let mut probs = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let clips = batch_clips(set, chunk);
        let mut g = Graph::new(false);
        let out = net.forward(&mut g, store, &clips, None, &mut rng)?;
        probs.extend(g.value(out.probs).iter().map(|&v| f64::from(v)));
    }
    Ok(probs)
}

/// Accuracy, F1, and confusion on every long clip of the `test` trials.
pub fn evaluate(
    cfg: &RunConfig,
    net: &FineTuneNet,
    store: &ParamStore<f32>,
    data: &Dataset,
    test: &TrialSet,
) -> Result<Metrics> {
    let set = data.segment(cfg.plan.t_long, |x| test.contains(&(x.subject, x.stimulus)))?;
    let s = samples(&set, cfg.task);
    if s.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let n = cfg.task.n_classes();
    let probs = predict(net, store, &set, &s)?;
    let truth: Vec<usize> = s.iter().map(|x| x.label).collect();
    Metrics::from_predictions(&argmax_rows(&probs, n), &truth, n)
}
