//! Projection head, temperature-scaled contrastive losses across subjects
//! (temporal) and across modalities, and the weighted pre-training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::dataset::{Clip, MiniBatch};
use crate::encoder::{clips_to_tensor, encoder_prefix, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub out: usize,
    pub dropout: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            out: 128,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Drop the positive pair from the cross-subject denominator sum.
    pub exclude_positive_in_s3: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            tau: 0.1,
            exclude_positive_in_s3: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.gamma)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// `z = W₃·Dropout(BN(W₂·ReLU(BN(W₁h + b₁)) + b₂)) + b₃`.
#[derive(Clone, Debug)]
pub struct Projector {
    w1: Linear,
    bn1: BatchNorm,
    w2: Linear,
    bn2: BatchNorm,
    w3: Linear,
    dropout: f64,
}

impl Projector {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        cfg: &ProjectorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{prefix}.w1"), input, cfg.hidden, rng)?,
            bn1: BatchNorm::new(store, &format!("{prefix}.bn1"), cfg.hidden)?,
            w2: Linear::new(store, &format!("{prefix}.w2"), cfg.hidden, cfg.hidden, rng)?,
            bn2: BatchNorm::new(store, &format!("{prefix}.bn2"), cfg.hidden)?,
            w3: Linear::new(store, &format!("{prefix}.w3"), cfg.hidden, cfg.out, rng)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<'a, T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        h: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let x = self.w1.forward(g, store, h)?;
        let x = self.bn1.forward(g, store, x)?;
        let x = g.relu(x);
        let x = self.w2.forward(g, store, x)?;
        let x = self.bn2.forward(g, store, x)?;
        let x = g.dropout(x, self.dropout, rng)?;
        self.w3.forward(g, store, x)
    }
}

/// Per-anchor contrastive losses for two aligned embedding sets.
///
/// Row `i` of `za` and row `i` of `zb` are positives. For an anchor in `za`
/// the denominator holds every other row of `za` and every row of `zb`
/// (including the positive unless `exclude_positive`). Returns `[2M, 1]`:
/// anchors from `za` first, then anchors from `zb` with the roles swapped.
pub fn anchor_losses<T: Scalar>(
    g: &mut Graph<'_, T>,
    za: Var,
    zb: Var,
    tau: f64,
    exclude_positive: bool,
) -> Result<Var> {
    let [m, d] = g.shape(za);
    if g.shape(zb) != [m, d] {
        return Err(Error::shape("contrastive", "embedding sets are not aligned"));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!("contrastive loss needs M ≥ 2, got {m}")));
    }
    let na = g.row_normalize(za);
    let nb = g.row_normalize(zb);
    let inv_tau = T::lit(1.0 / tau);
    let sim = |g: &mut Graph<'_, T>, x: Var, y: Var| -> Result<Var> {
        let s = g.matmul_t(x, y, false, true)?;
        Ok(g.scale(s, inv_tau))
    };
    let s_aa = sim(g, na, na)?;
    let s_ab = sim(g, na, nb)?;
    let s_bb = sim(g, nb, nb)?;
    let s_ba = g.transpose(s_ab);
    let logits_a = g.concat(&[s_aa, s_ab], 1)?;
    let logits_b = g.concat(&[s_bb, s_ba], 1)?;
    let targets: Vec<usize> = (0..m).map(|i| m + i).collect();
    let mut mask = vec![true; m * 2 * m];
    for i in 0..m {
        mask[i * 2 * m + i] = false;
        if exclude_positive {
            mask[i * 2 * m + m + i] = false;
        }
    }
    let la = g.masked_xent(logits_a, &targets, Some(&mask))?;
    let lb = g.masked_xent(logits_b, &targets, Some(&mask))?;
    g.concat(&[la, lb], 0)
}

/// Sum of [`anchor_losses`] over all `2M` anchors.
pub fn pair_loss<T: Scalar>(g: &mut Graph<'_, T>, za: Var, zb: Var, tau: f64, exclude_positive: bool) -> Result<Var> {
    let rows = anchor_losses(g, za, zb, tau, exclude_positive)?;
    Ok(g.sum_all(rows))
}

fn eval_anchor_losses(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64, exclude_positive: bool) -> Result<Vec<f64>> {
    let mut g = Graph::new(false);
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let rows = anchor_losses(&mut g, va, vb, tau, exclude_positive)?;
    Ok(g.value(rows).to_vec())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", "vectors differ in length"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Loss of anchor `i` of subject A against subject B.
pub fn tcl_anchor_loss(za: &Tensor<f64>, zb: &Tensor<f64>, i: usize, w: &LossWeights) -> Result<f64> {
    if i >= za.rows() {
        return Err(Error::InvalidArgument(format!("anchor {i} out of range")));
    }
    Ok(eval_anchor_losses(za, zb, w.tau, w.exclude_positive_in_s3)?[i])
}

/// Sum of anchor losses over both subjects.
pub fn tcl_batch_loss(za: &Tensor<f64>, zb: &Tensor<f64>, w: &LossWeights) -> Result<f64> {
    Ok(eval_anchor_losses(za, zb, w.tau, w.exclude_positive_in_s3)?
        .iter()
        .sum())
}

/// Cross-modal loss: within each subject the two modalities play the roles
/// of the two subjects. Inputs are embeddings after the shared cross-modal map.
pub fn cmcl_loss(per_subject: &[(&Tensor<f64>, &Tensor<f64>)], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (eeg, pps) in per_subject {
        total += tcl_batch_loss(eeg, pps, w)?;
    }
    Ok(total)
}

pub fn total_loss(l_eeg: f64, l_pps: f64, l_cc: f64, w: &LossWeights) -> f64 {
    w.alpha * l_eeg + w.beta * l_pps + w.gamma * l_cc
}

/// Which pre-training terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub tcl: bool,
    pub cmcl: bool,
}

/// Encoders, projectors, and the cross-modal map for one clip length.
#[derive(Clone, Debug)]
pub struct PretrainNet {
    pub t_seconds: f64,
    pub modalities: Vec<String>,
    pub encoders: Vec<Encoder>,
    pub projectors: Vec<Projector>,
    pub cross_modal: Linear,
}

/// Graph handles of one pre-training loss evaluation.
#[derive(Clone, Debug)]
pub struct PretrainLoss {
    pub total: Var,
    /// Per-modality temporal losses (absent when disabled).
    pub tcl: Vec<Option<Var>>,
    pub cmcl: Option<Var>,
}

pub fn projector_prefix(modality: &str, t_seconds: f64) -> String {
    format!("proj_{modality}_{t_seconds}s")
}

pub fn cross_modal_prefix(t_seconds: f64) -> String {
    format!("cm_{t_seconds}s")
}

impl PretrainNet {
    /// `inputs` lists `(modality id, flattened clip width)`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        t_seconds: f64,
        inputs: &[(String, usize)],
        enc: &EncoderConfig,
        proj: &ProjectorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut encoders = Vec::new();
        let mut projectors = Vec::new();
        for (id, width) in inputs {
            encoders.push(Encoder::new(store, &encoder_prefix(id, t_seconds), *width, enc, rng)?);
            projectors.push(Projector::new(
                store,
                &projector_prefix(id, t_seconds),
                enc.d_e,
                proj,
                rng,
            )?);
        }
        let cross_modal = Linear::new(store, &cross_modal_prefix(t_seconds), proj.out, proj.out, rng)?;
        Ok(Self {
            t_seconds,
            modalities: inputs.iter().map(|(id, _)| id.clone()).collect(),
            encoders,
            projectors,
            cross_modal,
        })
    }

    /// Projected embeddings of same-modality clips.
    pub fn embed<'a, T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        modality: usize,
        clips: &[&Clip],
        rng: &mut R,
    ) -> Result<Var> {
        let x = g.constant(clips_to_tensor(clips)?);
        let h = self.encoders[modality].forward(g, store, x, rng)?;
        self.projectors[modality].forward(g, store, h, rng)
    }

    /// `α·Σ L_eeg + β·Σ L_pps + γ·L_cc` over an (optionally expanded) batch.
    pub fn loss<'a, T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        batch: &MiniBatch,
        w: &LossWeights,
        toggles: LossToggles,
        rng: &mut R,
    ) -> Result<PretrainLoss> {
        if batch.modalities.len() != self.encoders.len() {
            return Err(Error::InvalidArgument(format!(
                "batch has {} modalities, network has {}",
                batch.modalities.len(),
                self.encoders.len()
            )));
        }
        let use_cmcl = toggles.cmcl && w.gamma > 0.0;
        if use_cmcl && self.encoders.len() != 2 {
            return Err(Error::InvalidArgument(
                "cross-modal loss needs exactly two modalities".into(),
            ));
        }
        if !toggles.tcl && !use_cmcl {
            return Err(Error::Config(
                "both temporal and cross-modal losses are disabled".into(),
            ));
        }
        let m = batch.m();
        let first: Vec<_> = (0..m).map(|i| (0, i)).collect();
        let second: Vec<_> = (0..m).map(|i| (0, m + i)).collect();
        let mut halves = Vec::new();
        let mut tcl = Vec::new();
        let mut terms = Vec::new();
        for (k, mb) in batch.modalities.iter().enumerate() {
            let clips: Vec<&Clip> = mb.a.iter().chain(&mb.b).collect();
            let z = self.embed(g, store, k, &clips, rng)?;
            let za = g.gather_rows(&[z], &first)?;
            let zb = g.gather_rows(&[z], &second)?;
            if toggles.tcl {
                let l = pair_loss(g, za, zb, w.tau, w.exclude_positive_in_s3)?;
                let weight = if k == 0 { w.alpha } else { w.beta };
                terms.push(g.scale(l, T::lit(weight)));
                tcl.push(Some(l));
            } else {
                tcl.push(None);
            }
            halves.push(z);
        }
        let mut cmcl = None;
        if use_cmcl {
            let ze = self.cross_modal.forward(g, store, halves[0])?;
            let zp = self.cross_modal.forward(g, store, halves[1])?;
            let mut parts = Vec::new();
            for idx in [&first, &second] {
                let e = g.gather_rows(&[ze], idx)?;
                let p = g.gather_rows(&[zp], idx)?;
                parts.push(pair_loss(g, e, p, w.tau, w.exclude_positive_in_s3)?);
            }
            let l = g.add(parts[0], parts[1])?;
            terms.push(g.scale(l, T::lit(w.gamma)));
            cmcl = Some(l);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(PretrainLoss { total, tcl, cmcl })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn weights(tau: f64) -> LossWeights {
        LossWeights {
            tau,
            ..LossWeights::default()
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[2.0, 3.0], &[2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 4.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn all_equal_embeddings_give_log_of_denominator_count() {
        let z = rows(&[&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]]);
        for tau in [0.1, 0.5, 1.0, 3.0] {
            let l = tcl_anchor_loss(&z, &z, 0, &weights(tau)).unwrap();
            assert!((l - 3f64.ln()).abs() < 1e-12);
            let lm = tcl_batch_loss(&z, &z, &weights(tau)).unwrap();
            assert!((lm - 4.0 * 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_positive_with_orthogonal_negatives() {
        // s(positive) = 1; the same-subject and cross-subject negatives are 0.
        let za = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zb = za.clone();
        let l = tcl_anchor_loss(&za, &zb, 0, &weights(0.5)).unwrap();
        let e2 = 2f64.exp();
        assert!((l - -(e2 / (2.0 + e2)).ln()).abs() < 1e-12);
        assert!((l - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn excluding_the_positive_changes_the_denominator() {
        let za = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = LossWeights {
            tau: 0.5,
            exclude_positive_in_s3: true,
            ..LossWeights::default()
        };
        let l = tcl_anchor_loss(&za, &za, 0, &w).unwrap();
        assert!((l - -(2f64.exp() / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_symmetric_in_subjects() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let w = weights(0.2);
        let ab = tcl_batch_loss(&a, &b, &w).unwrap();
        let ba = tcl_batch_loss(&b, &a, &w).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn stronger_positive_lowers_anchor_loss() {
        let za = rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let w = weights(0.3);
        let mut last = f64::INFINITY;
        for angle in [1.2f64, 0.9, 0.6, 0.3, 0.0] {
            // Positive rotates towards the anchor inside the plane orthogonal to row 1.
            let zb = rows(&[&[angle.cos(), 0.0, angle.sin()], &[0.0, 1.0, 0.0]]);
            let l = tcl_anchor_loss(&za, &zb, 0, &w).unwrap();
            assert!(l.is_finite() && l < last);
            last = l;
        }
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let one = rows(&[&[1.0, 2.0]]);
        assert!(tcl_batch_loss(&one, &one, &weights(0.1)).is_err());
        let two = rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let three = rows(&[&[1.0, 2.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(tcl_batch_loss(&two, &three, &weights(0.1)).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0, 4.0, 1.0, &w), 4.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let tcl_only = LossWeights { gamma: 0.0, ..w };
        assert_eq!(total_loss(2.0, 4.0, 100.0, &tcl_only), 3.0);
    }

    #[test]
    fn projector_eval_is_deterministic_and_shaped() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ProjectorConfig {
            hidden: 6,
            out: 3,
            dropout: 0.1,
        };
        let p = Projector::new(&mut store, "proj", 4, &cfg, &mut rng).unwrap();
        let h = Tensor::from_fn(5, 4, |r, c| (r * 4 + c) as f64 * 0.1 - 1.0);
        let run = |rng: &mut ChaCha8Rng| {
            let mut g = Graph::new(false);
            let x = g.constant(h.clone());
            let z = p.forward(&mut g, &store, x, rng).unwrap();
            g.tensor(z)
        };
        let a = run(&mut ChaCha8Rng::seed_from_u64(2));
        let b = run(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.shape(), [5, 3]);
        assert_eq!(a.data(), b.data());
    }
}
