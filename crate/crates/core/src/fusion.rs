//! Fine-tuning head: long/short feature fusion per modality, MCP confidence
//! weighting, and the feature-concat and decision-average baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::dataset::{segment_trial, Clip, ClipKey};
use crate::encoder::{clips_to_tensor, encoder_prefix, Encoder, EncoderConfig};
use crate::error::{DatasetError, Error, Result};
use crate::nn::Linear;

/// Lower bound on probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Mcp,
    FeatureConcat,
    DecisionAverage,
}

impl FusionStrategy {
    pub fn has_aux(self) -> bool {
        !matches!(self, FusionStrategy::FeatureConcat)
    }

    pub fn has_joint(self) -> bool {
        !matches!(self, FusionStrategy::DecisionAverage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortPooling {
    Mean,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolutionPlan {
    pub t_long: f64,
    pub t_short: f64,
    pub use_short: bool,
    pub short_pooling: ShortPooling,
}

impl Default for ResolutionPlan {
    fn default() -> Self {
        Self {
            t_long: 5.0,
            t_short: 1.0,
            use_short: true,
            short_pooling: ShortPooling::Mean,
        }
    }
}

impl ResolutionPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_long > 0.0 && self.t_short > 0.0) {
            return Err(Error::Config("clip lengths must be positive".into()));
        }
        if self.use_short {
            self.shorts_per_long()?;
        }
        Ok(())
    }

    pub fn shorts_per_long(&self) -> Result<usize> {
        let r = self.t_long / self.t_short;
        if (r - r.round()).abs() > 1e-9 || r < 1.0 {
            return Err(Error::Config(format!(
                "t_long = {} is not a multiple of t_short = {}",
                self.t_long, self.t_short
            )));
        }
        Ok(r.round() as usize)
    }

    /// Clip lengths whose encoders the plan needs.
    pub fn resolutions(&self) -> Vec<f64> {
        if self.use_short {
            vec![self.t_short, self.t_long]
        } else {
            vec![self.t_long]
        }
    }

    pub fn feature_dim(&self, d_e: usize) -> Result<usize> {
        Ok(match (self.use_short, self.short_pooling) {
            (false, _) => d_e,
            (true, ShortPooling::Mean) => 2 * d_e,
            (true, ShortPooling::Concat) => d_e * (1 + self.shorts_per_long()?),
        })
    }
}

/// Splits one long clip into contiguous `t_short` clips in temporal order.
pub fn decompose_long(clip: &Clip, t_short: f64) -> Result<Vec<Clip>, DatasetError> {
    let ratio = clip.t_seconds / t_short;
    if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
        return Err(DatasetError::BadClipLength {
            t_seconds: t_short,
            reason: format!("does not divide the {} s clip", clip.t_seconds),
        });
    }
    let fs = (clip.samples as f64 / clip.t_seconds).round() as u32;
    let key = ClipKey {
        modality: clip.modality,
        subject: clip.subject,
        stimulus: clip.stimulus,
    };
    let mut parts = segment_trial(&clip.data, clip.channels, fs, t_short, key)?;
    let n = parts.len();
    for (k, p) in parts.iter_mut().enumerate() {
        p.position = clip.position * n + k;
        p.variant = clip.variant;
    }
    Ok(parts)
}

/// `concat(long, mean(shorts))` when short features are used, else `long`.
pub fn modality_feature(long: &[f64], shorts: &[Vec<f64>], use_short: bool) -> Vec<f64> {
    let mut out = long.to_vec();
    if use_short && !shorts.is_empty() {
        let n = shorts.len() as f64;
        out.extend((0..long.len()).map(|j| shorts.iter().map(|s| s[j]).sum::<f64>() / n));
    }
    out
}

fn check_simplex(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidArgument(format!("{probs:?} is not a probability vector")));
    }
    Ok(())
}

/// Maximum class probability.
pub fn mcp(probs: &[f64]) -> Result<f64> {
    check_simplex(probs)?;
    Ok(probs.iter().copied().fold(0.0, f64::max))
}

/// `−log p[label]`, with the probability clamped at [`PROB_FLOOR`].
pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    check_simplex(probs)?;
    let p = probs
        .get(label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} out of range")))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub hidden: usize,
    /// Weight of each auxiliary cross-entropy term.
    pub aux_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Mcp,
            hidden: 256,
            aux_weight: 0.5,
        }
    }
}

/// Auxiliary per-modality classifiers and the two-layer joint classifier.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub strategy: FusionStrategy,
    pub n_classes: usize,
    pub aux_weight: f64,
    aux: Vec<Linear>,
    joint: Option<(Linear, Linear)>,
}

/// Graph handles of one fusion forward pass.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Class probabilities `[B, n_classes]`.
    pub probs: Var,
    /// Mean training objective over the batch (present when labels are given).
    pub loss: Option<Var>,
    /// Per-row MCP weights of each modality (MCP strategy only).
    pub weights: Vec<Vec<f64>>,
}

impl FusionHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        modalities: &[String],
        d_feat: usize,
        n_classes: usize,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if modalities.len() != 2 {
            return Err(Error::Config(format!(
                "fusion needs exactly two modalities, found {}",
                modalities.len()
            )));
        }
        if n_classes != 2 && n_classes != 4 {
            return Err(Error::Config(format!("unsupported class count {n_classes}")));
        }
        let aux = if cfg.strategy.has_aux() {
            modalities
                .iter()
                .map(|m| Linear::new(store, &format!("fusion_aux_{m}"), d_feat, n_classes, rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let joint = if cfg.strategy.has_joint() {
            Some((
                Linear::new(store, "fusion_joint1", 2 * d_feat, cfg.hidden, rng)?,
                Linear::new(store, "fusion_joint2", cfg.hidden, n_classes, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            strategy: cfg.strategy,
            n_classes,
            aux_weight: cfg.aux_weight,
            aux,
            joint,
        })
    }

    fn joint_logits<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, h: Var) -> Result<Var> {
        let (l1, l2) = self.joint.as_ref().expect("joint classifier");
        let x = l1.forward(g, store, h)?;
        let x = g.relu(x);
        l2.forward(g, store, x)
    }

    fn mean_ce<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
        let rows = g.masked_xent(logits, labels, None)?;
        g.mean(rows, 0)
    }

    /// Fuses `features[m]: [B, d_feat]`. `fixed_weights` pins the MCP
    /// weights instead of deriving them from the auxiliary heads.
    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        features: &[Var],
        labels: Option<&[usize]>,
        fixed_weights: Option<&[Vec<f64>]>,
    ) -> Result<FusionOutput> {
        let aux_logits = self
            .aux
            .iter()
            .zip(features)
            .map(|(l, &h)| l.forward(g, store, h))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::new();
        let (probs, main_loss) = match self.strategy {
            FusionStrategy::Mcp | FusionStrategy::FeatureConcat => {
                let mut parts = features.to_vec();
                if self.strategy == FusionStrategy::Mcp {
                    for (k, (&h, &logits)) in features.iter().zip(&aux_logits).enumerate() {
                        let w: Vec<f64> = match fixed_weights {
                            Some(fixed) => fixed[k].clone(),
                            None => {
                                let p = g.softmax(logits, 1)?;
                                g.value(p)
                                    .chunks(self.n_classes)
                                    .map(|row| row.iter().map(|v| v.as_f64()).fold(0.0, f64::max))
                                    .collect()
                            }
                        };
                        let [b, d] = g.shape(h);
                        let gate = g.constant(Tensor::from_fn(b, d, |r, _| T::lit(w[r])));
                        parts[k] = g.hadamard(h, gate)?;
                        weights.push(w);
                    }
                }
                let joint_in = g.concat(&parts, 1)?;
                let logits = self.joint_logits(g, store, joint_in)?;
                let probs = g.softmax(logits, 1)?;
                let loss = labels.map(|y| Self::mean_ce(g, logits, y)).transpose()?;
                (probs, loss)
            }
            FusionStrategy::DecisionAverage => {
                let pa = g.softmax(aux_logits[0], 1)?;
                let pb = g.softmax(aux_logits[1], 1)?;
                let sum = g.add(pa, pb)?;
                (g.scale(sum, T::lit(0.5)), None)
            }
        };
        let loss = match labels {
            None => None,
            Some(y) => {
                let mut aux_total: Option<Var> = None;
                for &logits in &aux_logits {
                    let l = Self::mean_ce(g, logits, y)?;
                    aux_total = Some(match aux_total {
                        None => l,
                        Some(acc) => g.add(acc, l)?,
                    });
                }
                match (main_loss, aux_total) {
                    (Some(main), Some(aux)) => {
                        let aux = g.scale(aux, T::lit(self.aux_weight));
                        Some(g.add(main, aux)?)
                    }
                    (Some(main), None) => Some(main),
                    (None, aux) => aux,
                }
            }
        };
        Ok(FusionOutput { probs, loss, weights })
    }
}

/// Long (and optionally short) encoders per modality plus the fusion head.
#[derive(Clone, Debug)]
pub struct FineTuneNet {
    pub plan: ResolutionPlan,
    pub modalities: Vec<String>,
    pub long: Vec<Encoder>,
    pub short: Vec<Encoder>,
    pub head: FusionHead,
}

impl FineTuneNet {
    /// `inputs` lists `(modality id, channels, sample rate)`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        inputs: &[(String, usize, u32)],
        plan: &ResolutionPlan,
        enc: &EncoderConfig,
        fusion: &FusionConfig,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        plan.validate()?;
        let width = |c: usize, fs: u32, t: f64| c * (t * f64::from(fs)).round() as usize;
        let mut long = Vec::new();
        let mut short = Vec::new();
        for (id, c, fs) in inputs {
            long.push(Encoder::new(
                store,
                &encoder_prefix(id, plan.t_long),
                width(*c, *fs, plan.t_long),
                enc,
                rng,
            )?);
            if plan.use_short {
                short.push(Encoder::new(
                    store,
                    &encoder_prefix(id, plan.t_short),
                    width(*c, *fs, plan.t_short),
                    enc,
                    rng,
                )?);
            }
        }
        let modalities: Vec<String> = inputs.iter().map(|(id, _, _)| id.clone()).collect();
        let head = FusionHead::new(store, &modalities, plan.feature_dim(enc.d_e)?, n_classes, fusion, rng)?;
        Ok(Self {
            plan: plan.clone(),
            modalities,
            long,
            short,
            head,
        })
    }

    /// Encoder prefixes the network reads from pre-training checkpoints.
    pub fn encoder_prefixes(&self) -> Vec<String> {
        self.long.iter().chain(&self.short).map(|e| e.prefix.clone()).collect()
    }

    /// Features `H_m: [B, d_feat]` for one modality's long clips.
    pub fn modality_features<'a, T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        modality: usize,
        clips: &[&Clip],
        rng: &mut R,
    ) -> Result<Var> {
        let x = g.constant(clips_to_tensor(clips)?);
        let long = self.long[modality].forward(g, store, x, rng)?;
        if !self.plan.use_short {
            return Ok(long);
        }
        let mut shorts = Vec::new();
        for c in clips {
            shorts.extend(decompose_long(c, self.plan.t_short)?);
        }
        let refs: Vec<&Clip> = shorts.iter().collect();
        let xs = g.constant(clips_to_tensor(&refs)?);
        let hs = self.short[modality].forward(g, store, xs, rng)?;
        let b = clips.len();
        let n = shorts.len() / b;
        let d = g.shape(hs)[1];
        let pooled = match self.plan.short_pooling {
            ShortPooling::Mean => {
                let inv = T::lit(1.0 / n as f64);
                let pool = g.constant(Tensor::from_fn(
                    b,
                    b * n,
                    |r, c| {
                        if c / n == r {
                            inv
                        } else {
                            T::zero()
                        }
                    },
                ));
                g.matmul(pool, hs)?
            }
            ShortPooling::Concat => g.reshape(hs, b, n * d)?,
        };
        g.concat(&[long, pooled], 1)
    }

    /// Full forward pass over `clips[m]` (aligned rows across modalities).
    pub fn forward<'a, T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        clips: &[Vec<&Clip>],
        labels: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<FusionOutput> {
        self.forward_fixed(g, store, clips, labels, None, rng)
    }

    /// [`FineTuneNet::forward`] with optionally pinned MCP weights.
    pub fn forward_fixed<'a, T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        clips: &[Vec<&Clip>],
        labels: Option<&[usize]>,
        fixed_weights: Option<&[Vec<f64>]>,
        rng: &mut R,
    ) -> Result<FusionOutput> {
        if clips.len() != self.long.len() {
            return Err(Error::InvalidArgument("one clip list per modality required".into()));
        }
        let features = clips
            .iter()
            .enumerate()
            .map(|(m, c)| self.modality_features(g, store, m, c, rng))
            .collect::<Result<Vec<_>>>()?;
        self.head.forward(g, store, &features, labels, fixed_weights)
    }
}
