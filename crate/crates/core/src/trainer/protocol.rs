//! Ten-fold cross-stimulus and leave-one-subject-out protocols.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;

use super::finetune::{evaluate, finetune};
use super::metrics::{pooled_confusion, summarize, Metrics, Summary};
use super::pretrain::pretrain;
use super::{rng_for, LossCurve, TrialSet};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::checkpoint;

/// Minimum stimulus count of the cross-stimulus protocol.
pub const MIN_TENFOLD_STIMULI: usize = 10;

/// Trials of one fold or round. Both pre-training and fine-tuning use only
/// `train`; `val` selects checkpoints; `test` is evaluated once.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub name: String,
    pub train: TrialSet,
    pub val: TrialSet,
    pub test: TrialSet,
}

fn all_trials(data: &Dataset) -> TrialSet {
    data.trials.iter().map(|t| (t.subject, t.stimulus)).collect()
}

/// Chooses `floor(fraction · n)` of `stimuli` for validation.
fn pick_val(stimuli: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let n = (fraction * stimuli.len() as f64).floor() as usize;
    let mut s = stimuli.to_vec();
    s.shuffle(&mut rng_for(seed, 0x5A1));
    s.truncate(n);
    s.sort_unstable();
    s
}

/// Splits every trial into training and validation trials, holding out a
/// `val_fraction` share of stimuli across all subjects.
pub fn holdout(cfg: &RunConfig, data: &Dataset) -> (TrialSet, TrialSet) {
    let stimuli: Vec<usize> = (0..data.n_stimuli()).collect();
    let val_stim = pick_val(&stimuli, cfg.protocol.val_fraction, cfg.seed);
    all_trials(data).into_iter().partition(|&(_, s)| !val_stim.contains(&s))
}

/// Partitions stimuli into `folds` near-equal random groups. Training
/// stimuli of each fold lose a validation share; all subjects are kept.
pub fn tenfold_plans(cfg: &RunConfig, data: &Dataset) -> Result<Vec<FoldPlan>> {
    let n = data.n_stimuli();
    let k = cfg.protocol.folds;
    if n < MIN_TENFOLD_STIMULI.max(k) {
        return Err(Error::InvalidArgument(format!(
            "cross-stimulus protocol with {k} folds needs at least {} stimuli, dataset has {n}",
            MIN_TENFOLD_STIMULI.max(k)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(cfg.seed, 0xF01D));
    let trials = all_trials(data);
    let mut plans = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let test_stim: Vec<usize> = order[start..start + size].to_vec();
        start += size;
        let mut rest: Vec<usize> = (0..n).filter(|s| !test_stim.contains(s)).collect();
        rest.sort_unstable();
        let val_stim = pick_val(&rest, cfg.protocol.val_fraction, cfg.seed.wrapping_add(f as u64));
        let split =
            |keep: &dyn Fn(usize) -> bool| -> TrialSet { trials.iter().copied().filter(|&(_, s)| keep(s)).collect() };
        plans.push(FoldPlan {
            name: format!("fold{:02}", f + 1),
            test: split(&|s| test_stim.contains(&s)),
            val: split(&|s| val_stim.contains(&s)),
            train: split(&|s| !test_stim.contains(&s) && !val_stim.contains(&s)),
        });
    }
    Ok(plans)
}

/// One round per subject; the remaining subjects train, with a validation
/// share of stimuli held out from them.
pub fn loso_plans(cfg: &RunConfig, data: &Dataset) -> Result<Vec<FoldPlan>> {
    let n = data.n_subjects();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-subject-out needs at least 2 subjects, dataset has {n}"
        )));
    }
    let trials = all_trials(data);
    let stimuli: Vec<usize> = (0..data.n_stimuli()).collect();
    Ok((0..n)
        .map(|held| {
            let val_stim = pick_val(&stimuli, cfg.protocol.val_fraction, cfg.seed.wrapping_add(held as u64));
            let mut plan = FoldPlan {
                name: data.manifest.subjects[held].clone(),
                train: TrialSet::new(),
                val: TrialSet::new(),
                test: TrialSet::new(),
            };
            for &(subj, stim) in &trials {
                let set = if subj == held {
                    &mut plan.test
                } else if val_stim.contains(&stim) {
                    &mut plan.val
                } else {
                    &mut plan.train
                };
                set.insert((subj, stim));
            }
            plan
        })
        .collect())
}

/// Fails when any trial (and therefore any clip) used for training or
/// checkpoint selection also appears in the test set.
pub fn audit(plan: &FoldPlan) -> Result<()> {
    if plan.test.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: empty test set", plan.name)));
    }
    let leaked: Vec<_> = plan.train.union(&plan.val).filter(|t| plan.test.contains(t)).collect();
    if !leaked.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: test trials {leaked:?} also used for training",
            plan.name
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub name: String,
    pub metrics: Metrics,
    pub curves: Vec<LossCurve>,
    pub skipped_steps: usize,
}

/// Pre-trains (when enabled), fine-tunes, and evaluates one fold. Writes
/// loss curves and checkpoints under `out` when given.
pub fn run_fold(cfg: &RunConfig, data: &Dataset, plan: &FoldPlan, seed: u64, out: Option<&Path>) -> Result<FoldResult> {
    audit(plan)?;
    let mut curves = Vec::new();
    let mut skipped = 0;
    let pre = if cfg.pretrain.enabled {
        let p = pretrain(cfg, data, &plan.train, &plan.val, seed)?;
        curves.extend(p.curves);
        skipped += p.skipped_steps;
        Some(p.store)
    } else {
        None
    };
    let ft = finetune(cfg, data, &plan.train, &plan.val, pre.as_ref(), seed.wrapping_add(1))?;
    curves.push(ft.curve);
    skipped += ft.skipped_steps;
    let metrics = evaluate(cfg, &ft.net, &ft.store, data, &plan.test)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for c in &curves {
            std::fs::write(dir.join(c.file_name()), c.to_csv())?;
        }
        if let Some(p) = &pre {
            checkpoint::save(&dir.join("pretrain.ckpt"), p, &[""], &plan.name)?;
        }
        checkpoint::save(&dir.join("finetune.ckpt"), &ft.store, &[""], &plan.name)?;
    }
    Ok(FoldResult {
        name: plan.name.clone(),
        metrics,
        curves,
        skipped_steps: skipped,
    })
}

/// Seed of fold `i`, independent of scheduling.
pub fn fold_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug)]
pub struct ProtocolReport {
    pub folds: Vec<FoldResult>,
}

impl ProtocolReport {
    pub fn accuracy(&self) -> Summary {
        summarize(&self.folds.iter().map(|f| f.metrics.accuracy).collect::<Vec<_>>())
    }

    pub fn f1(&self) -> Summary {
        summarize(&self.folds.iter().map(|f| f.metrics.f1).collect::<Vec<_>>())
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("fold,acc,f1\n");
        for f in &self.folds {
            writeln!(out, "{},{},{}", f.name, f.metrics.accuracy, f.metrics.f1).expect("string write");
        }
        let (a, f) = (self.accuracy(), self.f1());
        writeln!(out, "mean,{},{}", a.mean, f.mean).expect("string write");
        writeln!(out, "std,{},{}", a.std, f.std).expect("string write");
        out
    }

    /// Confusion matrix pooled over folds, rows are true classes.
    pub fn confusion_csv(&self) -> String {
        let parts: Vec<&Metrics> = self.folds.iter().map(|f| &f.metrics).collect();
        let pooled = pooled_confusion(&parts);
        let mut out = String::from("true");
        for p in 0..pooled.len() {
            write!(out, ",pred_{p}").expect("string write");
        }
        out.push('\n');
        for (t, row) in pooled.iter().enumerate() {
            write!(out, "{t}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path, task: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("metrics_{task}.csv")), self.metrics_csv())?;
        std::fs::write(dir.join(format!("confusion_{task}.csv")), self.confusion_csv())?;
        Ok(())
    }
}

/// Runs every fold on up to `jobs` threads. Results are ordered by fold and
/// do not depend on `jobs`.
pub fn run_protocol(
    cfg: &RunConfig,
    data: &Dataset,
    plans: &[FoldPlan],
    jobs: usize,
    out: Option<&Path>,
    on_fold: &(dyn Fn(&FoldResult) + Sync),
) -> Result<ProtocolReport> {
    for p in plans {
        audit(p)?;
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FoldResult>>>> = Mutex::new((0..plans.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= plans.len() {
            break;
        }
        let dir = out.map(|d| d.join("folds").join(&plans[i].name));
        let r = run_fold(cfg, data, &plans[i], fold_seed(cfg.seed, i), dir.as_deref());
        if let Ok(f) = &r {
            on_fold(f);
        }
        let failed = r.is_err();
        slots.lock().expect("fold results lock")[i] = Some(r);
        if failed {
            next.store(plans.len(), Ordering::SeqCst);
        }
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.clamp(1, plans.len().max(1)) {
            s.spawn(worker);
        }
        worker();
    });
    let mut folds = Vec::with_capacity(plans.len());
    for r in slots.into_inner().expect("fold results lock").into_iter().flatten() {
        folds.push(r?);
    }
    let report = ProtocolReport { folds };
    if let Some(dir) = out {
        report.write(dir, cfg.task.name())?;
    }
    Ok(report)
}
