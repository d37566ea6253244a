//! Optimization, pre-training and fine-tuning loops, metrics, and the
//! cross-validation protocols.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamKind, ParamStore};
use crate::error::Result;

pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod protocol;

pub use finetune::{evaluate, finetune, FinetuneOutcome};
pub use metrics::{summarize, Metrics, Summary};
pub use optim::{lr_at, Adam, AdamConfig};
pub use pretrain::{alignment, pretrain, Alignment, PretrainOutcome};
pub use protocol::{
    audit, holdout, loso_plans, run_fold, run_protocol, tenfold_plans, FoldPlan, FoldResult, ProtocolReport,
};

/// `(subject index, stimulus index)` pairs selecting whole trials.
pub type TrialSet = BTreeSet<(usize, usize)>;

/// Independent deterministic stream `stream` of `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adds every tensor of `src` to `dst`, keeping names and kinds.
pub fn merge_into(dst: &mut ParamStore<f32>, src: &ParamStore<f32>) -> Result<()> {
    for (_, p) in src.iter() {
        match p.kind {
            ParamKind::Trainable => dst.add(&p.name, p.tensor.clone())?,
            ParamKind::Buffer => dst.add_buffer(&p.name, p.tensor.clone())?,
        };
    }
    Ok(())
}

/// Per-epoch training and validation loss of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCurve {
    /// `<phase>_<t>s`, used as the CSV file stem.
    pub label: String,
    pub rows: Vec<(usize, f64, Option<f64>)>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl LossCurve {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            rows: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn push(&mut self, epoch: usize, train: f64, val: Option<f64>) {
        self.rows.push((epoch, train, val));
    }

    pub fn file_name(&self) -> String {
        format!("loss_{}.csv", self.label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (e, t, v) in &self.rows {
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{e},{t},{v}").expect("string write");
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|(_, t, v)| t.is_finite() && v.is_none_or(f64::is_finite))
    }

    /// Validation loss of the kept epoch.
    pub fn best_val(&self) -> Option<f64> {
        let e = self.best_epoch?;
        self.rows.iter().find(|r| r.0 == e).and_then(|r| r.2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = rng_for(3, 1).random();
        let b: u64 = rng_for(3, 2).random();
        assert_ne!(a, b);
        assert_eq!(a, rng_for(3, 1).random::<u64>());
    }

    #[test]
    fn curve_csv_leaves_missing_validation_empty() {
        let mut c = LossCurve::new("pretrain_5s");
        c.push(0, 1.5, Some(1.25));
        c.push(1, 1.0, None);
        assert_eq!(c.to_csv(), "epoch,train_loss,val_loss\n0,1.5,1.25\n1,1,\n");
        assert_eq!(c.file_name(), "loss_pretrain_5s.csv");
        c.best_epoch = Some(0);
        assert_eq!(c.best_val(), Some(1.25));
    }

    #[test]
    fn merge_keeps_kinds() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(1, 2)).unwrap();
        a.add_buffer("rm", Tensor::zeros(1, 2)).unwrap();
        let mut b = ParamStore::new();
        merge_into(&mut b, &a).unwrap();
        assert_eq!(b.trainable().len(), 1);
        assert_eq!(b.len(), 2);
        assert!(merge_into(&mut b, &a).is_err());
    }
}
