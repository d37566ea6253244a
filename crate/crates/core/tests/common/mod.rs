//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::path::Path;

use physiosync::config::RunConfig;
use physiosync::dataset::Dataset;
use physiosync::encoder::EncoderConfig;

/// Desk preset shrunk so that a whole protocol finishes in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.encoder = EncoderConfig {
        views: 2,
        d_e: 8,
        heads: 2,
        blocks: 1,
        ffn_dim: 16,
        prompts: 1,
        dropout: 0.1,
    };
    c.projector.hidden = 16;
    c.projector.out = 8;
    c.fusion.hidden = 16;
    c.pretrain.epochs = 2;
    c.finetune.epochs = 2;
    c.finetune.batch = 32;
    c.synth.n_subjects = 3;
    c.synth.n_stimuli = 10;
    c.synth.trial_seconds = 10;
    c.synth.eeg_channels = 3;
    c.synth.fs = 32;
    c
}

/// Writes the synthetic dataset of `cfg` into `dir` and loads it.
pub fn synth_dataset(cfg: &RunConfig, dir: &Path) -> Dataset {
    let mut sc = cfg.synth.clone();
    sc.seed = cfg.seed;
    let m = physiosync::synth::generate(&sc, dir).unwrap();
    Dataset::from_manifest(m.clone(), &cfg.data.preprocess(m.kind)).unwrap()
}
