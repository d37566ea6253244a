//! Portable dataset container, preprocessing, and paired mini-batch sampling.

mod batch;
mod manifest;
mod preprocess;

pub use batch::{
    sample_minibatch, ClipSet, Dataset, MiniBatch, ModalityBatch, PreprocessConfig, SegmentedTrial, Trial,
};
pub use manifest::{
    load_manifest, read_signal, write_signal, DatasetKind, DatasetManifest, ModalityDescriptor, RatingScale,
    TrialDescriptor, MANIFEST_FILE,
};
pub use preprocess::{
    baseline_correct, binarize_on_scale, binarize_rating, four_class, keep_last, segment_trial, Clip, ClipKey,
    LabelSet, Level, Task,
};
