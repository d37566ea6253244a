//! Finite-difference gradient suite over every primitive and the composed
//! pre-training and fine-tuning graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_primitive, primitive_names, DEFAULT_EPS, PRIMITIVE_TOL};
use crate::autodiff::{grad_check, GradCheckReport, ParamStore};
use crate::contrastive::{LossToggles, LossWeights, PretrainNet, ProjectorConfig};
use crate::dataset::{segment_trial, Clip, ClipKey, MiniBatch, ModalityBatch};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::fusion::{FineTuneNet, FusionConfig, FusionStrategy, ResolutionPlan, ShortPooling};

pub const PRETRAIN_LOSS: &str = "pretrain_loss";
pub const FINETUNE_LOSS: &str = "finetune_loss";

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(PRIMITIVE_TOL)
    }
}

/// Small dropout-free encoder so every parameter can be perturbed.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        views: 2,
        d_e: 4,
        heads: 2,
        blocks: 1,
        ffn_dim: 8,
        prompts: 1,
        dropout: 0.0,
    }
}

fn tiny_projector() -> ProjectorConfig {
    ProjectorConfig {
        hidden: 6,
        out: 4,
        dropout: 0.0,
    }
}

const FS: u32 = 4;

fn random_clips<R: Rng>(rng: &mut R, modality: usize, subject: usize, channels: usize, t: f64, n: usize) -> Vec<Clip> {
    let len = (t * f64::from(FS)) as usize * n;
    let data: Vec<f32> = (0..channels * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let key = ClipKey {
        modality,
        subject,
        stimulus: 0,
    };
    segment_trial(&data, channels, FS, t, key).expect("whole clips")
}

/// Checks the total contrastive objective of a two-modality network with
/// respect to every encoder, projector, and cross-modal parameter.
pub fn check_pretrain_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 2.0;
    let channels = [2, 1];
    let inputs: Vec<(String, usize)> = ["eeg", "pps"]
        .iter()
        .zip(channels)
        .map(|(id, c)| (id.to_string(), c * (t * f64::from(FS)) as usize))
        .collect();
    let mut store = ParamStore::<f64>::new();
    let net = PretrainNet::new(&mut store, t, &inputs, &tiny_encoder(), &tiny_projector(), &mut rng)?;
    let m = 3;
    let batch = MiniBatch {
        subjects: (0, 1),
        slots: (0..m).map(|p| (0, p)).collect(),
        modalities: channels
            .iter()
            .enumerate()
            .map(|(k, &c)| ModalityBatch {
                modality: k,
                a: random_clips(&mut rng, k, 0, c, t, m),
                b: random_clips(&mut rng, k, 1, c, t, m),
            })
            .collect(),
    };
    let w = LossWeights {
        tau: 0.5,
        ..LossWeights::default()
    };
    let toggles = LossToggles { tcl: true, cmcl: true };
    grad_check(&store, true, DEFAULT_EPS, |g, s| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        Ok(net.loss(g, s, &batch, &w, toggles, &mut r)?.total)
    })
}

/// Checks the fine-tuning objective (long and short encoders, MCP fusion,
/// auxiliary heads) with the MCP weights pinned to random constants.
pub fn check_finetune_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = ResolutionPlan {
        t_long: 2.0,
        t_short: 1.0,
        use_short: true,
        short_pooling: ShortPooling::Mean,
    };
    let fusion = FusionConfig {
        strategy: FusionStrategy::Mcp,
        hidden: 6,
        aux_weight: 0.5,
    };
    let channels = [2, 1];
    let inputs = vec![
        ("eeg".to_string(), channels[0], FS),
        ("pps".to_string(), channels[1], FS),
    ];
    let mut store = ParamStore::<f64>::new();
    let net = FineTuneNet::new(&mut store, &inputs, &plan, &tiny_encoder(), &fusion, 2, &mut rng)?;
    let b = 3;
    let clips: Vec<Vec<Clip>> = channels
        .iter()
        .enumerate()
        .map(|(k, &c)| random_clips(&mut rng, k, 0, c, plan.t_long, b))
        .collect();
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let weights: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..b).map(|_| rng.random_range(0.5..1.0)).collect())
        .collect();
    grad_check(&store, true, DEFAULT_EPS, |g, s| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let refs: Vec<Vec<&Clip>> = clips.iter().map(|c| c.iter().collect()).collect();
        let out = net.forward_fixed(g, s, &refs, Some(&labels), Some(&weights), &mut r)?;
        Ok(out.loss.expect("labels given"))
    })
}

/// Names of every check in the suite.
pub fn check_names() -> Vec<&'static str> {
    let mut names = primitive_names();
    names.extend([PRETRAIN_LOSS, FINETUNE_LOSS]);
    names
}

pub fn run_check(name: &str, seed: u64) -> Result<CheckOutcome> {
    let report = match name {
        PRETRAIN_LOSS => check_pretrain_loss(seed)?,
        FINETUNE_LOSS => check_finetune_loss(seed)?,
        other => check_primitive(other, seed)?,
    };
    Ok(CheckOutcome {
        name: name.to_string(),
        seed,
        report,
    })
}

/// Every check for seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for name in check_names() {
        for seed in 0..seeds {
            out.push(run_check(name, seed)?);
        }
    }
    Ok(out)
}
