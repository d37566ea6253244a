//! Self-supervised temporal and cross-modal contrastive pre-training for
//! multimodal physiological signals, followed by supervised fine-tuning with
//! confidence-weighted fusion.
//!
//! The crate is organized bottom-up:
//!
//! - [`config`]: one TOML document holding every hyperparameter
//! - [`dataset`]: portable container, preprocessing, and pair-aware mini-batches
//! - [`augment`]: five-fold batch expansion (scaling, fixed-SNR noise)
//! - [`autodiff`] and [`nn`]: tape-based differentiation and layers
//! - [`encoder`]: gated multi-view embedding and transformer blocks
//! - [`contrastive`]: projector, temporal and cross-modal contrastive losses
//! - [`fusion`]: long/short feature fusion and MCP-weighted classification
//! - [`trainer`]: pre-training, fine-tuning, metrics, and evaluation protocols
//! - [`diagnostics`]: finite-difference gradient suite
//! - [`synth`]: synthetic multi-subject data with known shared structure

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{DatasetError, Error, Result};
