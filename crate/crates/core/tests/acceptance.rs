//! Acceptance suite. Each criterion prints one PASS or FAIL line; the binary
//! exits non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use physiosync::augment::{add_noise_snr, expand_batch};
use physiosync::autodiff::{ParamStore, Tensor};
use physiosync::config::RunConfig;
use physiosync::contrastive::{cmcl_loss, tcl_anchor_loss, tcl_batch_loss, LossWeights};
use physiosync::dataset::{
    load_manifest, sample_minibatch, Clip, Dataset, DatasetManifest, ModalityDescriptor, TrialDescriptor, MANIFEST_FILE,
};
use physiosync::diagnostics;
use physiosync::synth::{generate, SynthConfig};
use physiosync::trainer::{self, audit, loso_plans, run_protocol, tenfold_plans, TrialSet};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Loop-based reference: loss of anchor `i` of `x` against the aligned set `y`.
fn oracle_anchor(x: &Tensor<f64>, y: &Tensor<f64>, i: usize, tau: f64, exclude_positive: bool) -> f64 {
    let sim = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let m = x.rows();
    let s1 = (sim(x.row(i), y.row(i)) / tau).exp();
    let mut s2 = 0.0;
    for j in 0..m {
        if j != i {
            s2 += (sim(x.row(i), x.row(j)) / tau).exp();
        }
    }
    let mut s3 = 0.0;
    for j in 0..m {
        if !(exclude_positive && j == i) {
            s3 += (sim(x.row(i), y.row(j)) / tau).exp();
        }
    }
    -(s1 / (s2 + s3)).ln()
}

fn oracle_batch(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64, exclude_positive: bool) -> f64 {
    (0..a.rows())
        .map(|i| oracle_anchor(a, b, i, tau, exclude_positive) + oracle_anchor(b, a, i, tau, exclude_positive))
        .sum()
}

fn loss_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let m = rng.random_range(2..=10);
        let d = rng.random_range(1..=8);
        let tau = [0.1, 0.5, 1.0][case % 3];
        let exclude = case % 10 == 9;
        let w = LossWeights {
            tau,
            exclude_positive_in_s3: exclude,
            ..LossWeights::default()
        };
        let (a, b) = (random_tensor(&mut rng, m, d), random_tensor(&mut rng, m, d));
        for i in 0..m {
            let got = tcl_anchor_loss(&a, &b, i, &w).map_err(|e| e.to_string())?;
            worst = worst.max(rel_err(got, oracle_anchor(&a, &b, i, tau, exclude)));
        }
        let got = tcl_batch_loss(&a, &b, &w).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(got, oracle_batch(&a, &b, tau, exclude)));
        let subjects: Vec<(Tensor<f64>, Tensor<f64>)> = (0..rng.random_range(1..=3))
            .map(|_| (random_tensor(&mut rng, m, d), random_tensor(&mut rng, m, d)))
            .collect();
        let pairs: Vec<(&Tensor<f64>, &Tensor<f64>)> = subjects.iter().map(|(e, p)| (e, p)).collect();
        let got = cmcl_loss(&pairs, &w).map_err(|e| e.to_string())?;
        let want: f64 = subjects.iter().map(|(e, p)| oracle_batch(e, p, tau, exclude)).sum();
        worst = worst.max(rel_err(got, want));
    }
    let t = start.elapsed();
    check(
        worst < 1e-6 && t < Duration::from_secs(5),
        format!(
            "100 configurations, max relative error {worst:.2e}, {:.2} s",
            t.as_secs_f64()
        ),
    )
}

fn transform(t: &Tensor<f64>, q: &DMatrix<f64>, scale: f64) -> Tensor<f64> {
    let x = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let y = x * q * scale;
    Tensor::new(
        t.rows(),
        t.cols(),
        (0..t.rows())
            .flat_map(|r| y.row(r).iter().copied().collect::<Vec<_>>())
            .collect(),
    )
    .unwrap()
}

fn analytic_anchors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_equal = 0.0f64;
    for m in 2..=10 {
        for tau in [0.05, 0.1, 0.5, 1.0, 3.0] {
            let w = LossWeights {
                tau,
                ..LossWeights::default()
            };
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = Tensor::new(m, 6, v.iter().cycle().take(6 * m).copied().collect()).unwrap();
            let want = ((2 * m - 1) as f64).ln();
            for i in 0..m {
                let got = tcl_anchor_loss(&z, &z, i, &w).map_err(|e| e.to_string())?;
                worst_equal = worst_equal.max((got - want).abs());
            }
        }
    }
    let mut worst_inv = 0.0f64;
    for case in 0..50 {
        let (m, d) = (rng.random_range(2..=10), rng.random_range(2..=8));
        let w = LossWeights {
            tau: [0.1, 0.5, 1.0][case % 3],
            ..LossWeights::default()
        };
        let q = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let scale = rng.random_range(0.01..100.0);
        let t: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, m, d)).collect();
        let losses = |t: &[Tensor<f64>]| -> Result<Vec<f64>, String> {
            let mut v = vec![
                tcl_batch_loss(&t[0], &t[1], &w).map_err(|e| e.to_string())?,
                cmcl_loss(&[(&t[0], &t[1]), (&t[2], &t[3])], &w).map_err(|e| e.to_string())?,
            ];
            for i in 0..m {
                v.push(tcl_anchor_loss(&t[0], &t[1], i, &w).map_err(|e| e.to_string())?);
            }
            Ok(v)
        };
        let base = losses(&t)?;
        let rotated = losses(&t.iter().map(|x| transform(x, &q, 1.0)).collect::<Vec<_>>())?;
        let scaled = losses(
            &t.iter()
                .map(|x| transform(x, &DMatrix::identity(d, d), scale))
                .collect::<Vec<_>>(),
        )?;
        for ((b, r), s) in base.iter().zip(&rotated).zip(&scaled) {
            worst_inv = worst_inv.max(rel_err(*r, *b)).max(rel_err(*s, *b));
        }
    }
    check(
        worst_equal < 1e-9 && worst_inv < 1e-9,
        format!(
            "equal-embedding deviation from log(2M-1) {worst_equal:.2e}, rotation/scaling deviation {worst_inv:.2e}"
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let outcomes = diagnostics::gradient_suite(20).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| format!("{}@{} ({:.2e})", o.name, o.seed, o.report.max_rel_error))
        .collect();
    let worst = outcomes.iter().map(|o| o.report.max_rel_error).fold(0.0, f64::max);
    let checks = outcomes.len() / 20;
    check(
        failed.is_empty() && t < Duration::from_secs(60),
        format!(
            "{checks} checks x 20 seeds, worst relative error {worst:.2e}, {:.1} s, failures {failed:?}",
            t.as_secs_f64()
        ),
    )
}

/// Manifest with DEAP channel counts (32 EEG, 8 peripheral) whose signal
/// files are sparse, so only the byte-length validation touches them.
fn deap_channel_manifest(dir: &std::path::Path) -> DatasetManifest {
    let (fs, seconds) = (128u32, 63u32);
    let modalities = vec![
        ModalityDescriptor {
            id: "eeg".into(),
            channels: 32,
        },
        ModalityDescriptor {
            id: "pps".into(),
            channels: 8,
        },
    ];
    let subjects: Vec<String> = (0..32).map(SynthConfig::subject_id).collect();
    let mut trials = Vec::new();
    for s in &subjects {
        for v in (0..40).map(SynthConfig::stimulus_id) {
            let mut files = std::collections::BTreeMap::new();
            for md in &modalities {
                let rel = DatasetManifest::canonical_file(&md.id, s, &v);
                let path = dir.join(&rel);
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                let bytes = (md.channels * (fs * seconds) as usize * 4) as u64;
                std::fs::File::create(&path).unwrap().set_len(bytes).unwrap();
                files.insert(md.id.clone(), rel);
            }
            trials.push(TrialDescriptor {
                subject: s.clone(),
                stimulus: v,
                duration_seconds: f64::from(seconds),
                ratings: [("arousal".to_string(), 5.0), ("valence".to_string(), 5.0)].into(),
                files,
            });
        }
    }
    let m = DatasetManifest {
        name: "deap-geometry".into(),
        kind: physiosync::dataset::DatasetKind::Deap,
        sample_rate_hz: fs,
        baseline_seconds: 3.0,
        modalities,
        subjects,
        rating_scale: physiosync::dataset::DatasetKind::Deap.default_scale(),
        trials,
        root: dir.to_path_buf(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), m.to_json()).unwrap();
    m
}

fn clip_arithmetic() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sc = SynthConfig {
        n_subjects: 32,
        n_stimuli: 40,
        trial_seconds: 60,
        baseline_seconds: 3,
        fs: 128,
        eeg_channels: 1,
        pps_channels: 1,
        seed: 11,
        ..SynthConfig::default()
    };
    let m = generate(&sc, dir.path()).map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    let data = Dataset::from_manifest(m.clone(), &cfg.data.preprocess(m.kind)).map_err(|e| e.to_string())?;
    let set = data.segment(5.0, |_| true).map_err(|e| e.to_string())?;
    let per_trial: Vec<usize> = set.trials.iter().map(|t| t.positions()).collect();
    let per_subject = set
        .trials
        .iter()
        .filter(|t| t.subject == 0)
        .map(|t| t.positions())
        .sum::<usize>();
    let total = set.clip_count(0);
    let clips_ok =
        per_trial.iter().all(|&n| n == 12) && per_subject == 480 && total == 15_360 && set.clip_count(1) == total;

    let sparse = tempfile::tempdir().map_err(|e| e.to_string())?;
    deap_channel_manifest(sparse.path());
    let loaded = load_manifest(sparse.path()).map_err(|e| e.to_string())?;
    let channels_ok = loaded.modalities[0].channels == 32 && loaded.trials.len() == 1280;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut expansion_ok = true;
    for k in [1, 3, 8] {
        let batch = sample_minibatch(&set, 0, 1, k, &mut rng).map_err(|e| e.to_string())?;
        let expanded = expand_batch(&batch, &cfg.augment, &mut rng).map_err(|e| e.to_string())?;
        expansion_ok &= expanded.m() == 5 * k
            && expanded
                .modalities
                .iter()
                .all(|mb| mb.a.len() == 5 * k && mb.b.len() == 5 * k);
    }

    let n = 1_000_000;
    let signal: Vec<f32> = (0..n).map(|i| ((i as f64) * 0.013).sin() as f32 * 3.0 + 0.5).collect();
    let clip = Clip {
        data: signal.clone().into(),
        channels: 1,
        samples: n,
        modality: 0,
        subject: 0,
        stimulus: 0,
        position: 0,
        variant: 0,
        t_seconds: 1.0,
    };
    let noisy = add_noise_snr(&clip, 5.0, &mut rng).map_err(|e| e.to_string())?;
    let p_signal: f64 = signal.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / n as f64;
    let p_noise: f64 = noisy
        .data
        .iter()
        .zip(&signal)
        .map(|(&y, &x)| (f64::from(y) - f64::from(x)).powi(2))
        .sum::<f64>()
        / n as f64;
    let snr = 10.0 * (p_signal / p_noise).log10();

    check(
        clips_ok && channels_ok && expansion_ok && (snr - 5.0).abs() <= 0.2,
        format!(
            "clips/trial {:?}, clips/participant {per_subject}, total {total}; 32-channel manifest {}; 5x expansion {}; measured SNR {snr:.3} dB",
            per_trial.iter().min().zip(per_trial.iter().max()),
            if channels_ok { "valid" } else { "invalid" },
            if expansion_ok { "exact" } else { "wrong" },
        ),
    )
}

/// Desk configuration for the end-to-end runs: subjects differ strongly in
/// how the shared latent reaches their sensors, and fine-tuning trains only
/// the fusion head on top of frozen encoders.
fn e2e_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.synth.subject_mixing_noise = 1.5;
    c.finetune.freeze_encoders = true;
    c
}

/// Calibration split for held subject `held`: two high and two low stimuli
/// of that subject are tested; pre-training sees every other trial without
/// labels; fine-tuning uses only the other subjects.
fn calibration_split(cfg: &RunConfig, data: &Dataset, held: usize) -> (TrialSet, TrialSet, TrialSet) {
    let (mut test, mut hi, mut lo) = (TrialSet::new(), 0, 0);
    for t in data.trials.iter().filter(|t| t.subject == held) {
        let label = cfg.task.label(&t.labels);
        let count = if label == 1 { &mut hi } else { &mut lo };
        if *count < 2 {
            *count += 1;
            test.insert((t.subject, t.stimulus));
        }
    }
    let all: TrialSet = data.trials.iter().map(|t| (t.subject, t.stimulus)).collect();
    let unlabeled: TrialSet = all.iter().copied().filter(|k| !test.contains(k)).collect();
    let labeled: TrialSet = all.iter().copied().filter(|k| k.0 != held).collect();
    (unlabeled, labeled, test)
}

struct Round {
    accuracy: f64,
    gaps: Vec<f64>,
}

fn round(cfg: &RunConfig, data: &Dataset, held: usize, pretrained: bool) -> Result<Round, String> {
    let s = |e: physiosync::Error| e.to_string();
    let (unlabeled, labeled, test) = calibration_split(cfg, data, held);
    let empty = TrialSet::new();
    let (store, gaps) = if pretrained {
        let pre = trainer::pretrain(cfg, data, &unlabeled, &empty, cfg.seed + 1).map_err(s)?;
        let t = cfg.plan.t_long;
        let (mut net_store, net) =
            trainer::pretrain::build_pretrain_net(cfg, data, t, &mut trainer::rng_for(0, 0)).map_err(s)?;
        net_store.copy_from(&pre.store, "").map_err(s)?;
        let set = data.segment(t, |_| true).map_err(|e| e.to_string())?;
        let gaps = (0..data.n_modalities())
            .map(|m| trainer::alignment(&net, &net_store, &set, m).map(|a| a.gap()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(s)?;
        (Some(pre.store), gaps)
    } else {
        (None::<ParamStore<f32>>, Vec::new())
    };
    let ft = trainer::finetune(cfg, data, &labeled, &empty, store.as_ref(), cfg.seed + 2).map_err(s)?;
    let metrics = trainer::evaluate(cfg, &ft.net, &ft.store, data, &test).map_err(s)?;
    Ok(Round {
        accuracy: metrics.accuracy,
        gaps,
    })
}

fn e2e_data(cfg: &RunConfig, dir: &std::path::Path) -> Dataset {
    common::synth_dataset(cfg, dir)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = e2e_config(0);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = e2e_data(&cfg, dir.path());
    let (mut pre_acc, mut rand_acc, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
    for held in 0..data.n_subjects() {
        let p = round(&cfg, &data, held, true)?;
        let r = round(&cfg, &data, held, false)?;
        pre_acc.push(p.accuracy);
        rand_acc.push(r.accuracy);
        gaps.extend(p.gaps);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pa, ra) = (mean(&pre_acc), mean(&rand_acc));
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let t = start.elapsed();
    check(
        min_gap >= 0.2 && pa >= 0.9 && pa - ra >= 0.05 && t <= Duration::from_secs(20 * 60),
        format!(
            "alignment gaps {gaps:.3?}; accuracy pre-trained {pa:.3} {pre_acc:.3?} vs random init {ra:.3} {rand_acc:.3?}; {:.0} s",
            t.as_secs_f64()
        ),
    )
}

fn ablation() -> Outcome {
    let mut sums = [0.0f64; 3];
    let seeds = 5;
    for seed in 0..seeds {
        let base = e2e_config(seed);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data = e2e_data(&base, dir.path());
        let held = seed as usize % data.n_subjects();
        for (v, sum) in sums.iter_mut().enumerate() {
            let mut cfg = base.clone();
            match v {
                1 => cfg.pretrain.use_da = false,
                2 => cfg.pretrain.use_cmcl = false,
                _ => {}
            }
            *sum += round(&cfg, &data, held, true)?.accuracy;
        }
    }
    let [full, no_da, no_cmcl] = sums.map(|s| s / seeds as f64);
    check(
        full >= no_da - 0.01 && full >= no_cmcl - 0.01,
        format!("mean accuracy over {seeds} seeds: full {full:.3}, without augmentation {no_da:.3}, without cross-modal term {no_cmcl:.3}"),
    )
}

fn protocol_audits() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = common::tiny_config(21);
    cfg.synth.n_subjects = 4;
    cfg.synth.n_stimuli = 12;
    let data = common::synth_dataset(&cfg, dir.path());
    let tenfold = tenfold_plans(&cfg, &data).map_err(|e| e.to_string())?;
    let loso = loso_plans(&cfg, &data).map_err(|e| e.to_string())?;
    let audited = tenfold.iter().chain(&loso).filter(|p| audit(p).is_ok()).count();
    let csvs = |plans: &[trainer::FoldPlan]| -> Result<(String, String), String> {
        let r = run_protocol(&cfg, &data, plans, 1, None, &|_| {}).map_err(|e| e.to_string())?;
        Ok((r.metrics_csv(), r.confusion_csv()))
    };
    let same_tenfold = csvs(&tenfold)? == csvs(&tenfold)?;
    let same_loso = csvs(&loso)? == csvs(&loso)?;
    check(
        audited == tenfold.len() + loso.len() && same_tenfold && same_loso,
        format!(
            "{audited}/{} folds and rounds pass the leakage audit; byte-identical CSVs: ten-fold {same_tenfold}, LOSO {same_loso}",
            tenfold.len() + loso.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("loss oracle", loss_oracle),
        ("analytic anchors", analytic_anchors),
        ("gradient suite", gradient_suite),
        ("dataset and augmentation arithmetic", clip_arithmetic),
        ("end-to-end synthetic run", end_to_end),
        ("ablation monotonicity", ablation),
        ("protocol audits and determinism", protocol_audits),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
