//! Modality encoder: gated multi-view embedding, token assembly with class,
//! positional, modality, and prompt tokens, then pre-norm transformer blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, BatchNorm, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Number of views `z`.
    pub views: usize,
    /// Embedding width `d_e`.
    pub d_e: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of the feed-forward sublayer; 0 means `4·d_e`.
    pub ffn_dim: usize,
    pub prompts: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            views: 16,
            d_e: 128,
            heads: 4,
            blocks: 2,
            ffn_dim: 0,
            prompts: 4,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.blocks == 0 || self.d_e == 0 {
            return Err(Error::Config("encoder views, blocks, and d_e must be positive".into()));
        }
        if self.heads == 0 || !self.d_e.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_e = {} is not divisible by {} heads",
                self.d_e, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.d_e
        } else {
            self.ffn_dim
        }
    }

    /// Tokens per sequence: class token, views, prompts.
    pub fn seq_len(&self) -> usize {
        1 + self.views + self.prompts
    }
}

/// Parameter-archive prefix of the encoder for one modality and clip length.
pub fn encoder_prefix(modality: &str, t_seconds: f64) -> String {
    format!("enc_{modality}_{t_seconds}s")
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
    pub input_dim: usize,
    /// All `z` view maps packed side by side: `[input, z·d_e]`.
    views: Linear,
    gate: Linear,
    /// Per-view, per-feature normalization over the packed `z·d_e` columns.
    view_norm: BatchNorm,
    pub cls: ParamId,
    pub pos: ParamId,
    pub modality: ParamId,
    pub prompts: Option<ParamId>,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_e;
        let name = |s: &str| format!("{prefix}.{s}");
        let views = Linear::new(store, &name("views"), input_dim, cfg.views * d, rng)?;
        let gate = Linear::new(store, &name("gate"), input_dim, d, rng)?;
        let view_norm = BatchNorm::new(store, &name("view_bn"), cfg.views * d)?;
        let cls = store.add(&name("cls"), normal_tensor(1, d, 0.02, rng))?;
        let pos = store.add(&name("pos"), normal_tensor(cfg.seq_len(), d, 0.02, rng))?;
        let modality = store.add(&name("modality"), normal_tensor(1, d, 0.02, rng))?;
        let prompts = if cfg.prompts > 0 {
            Some(store.add(&name("prompts"), normal_tensor(cfg.prompts, d, 0.02, rng))?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("{prefix}.block{b}.{s}");
            blocks.push(Block {
                norm1: LayerNorm::new(store, &n("norm1"), d)?,
                q: Linear::new(store, &n("q"), d, d, rng)?,
                k: Linear::new(store, &n("k"), d, d, rng)?,
                v: Linear::new(store, &n("v"), d, d, rng)?,
                o: Linear::new(store, &n("o"), d, d, rng)?,
                norm2: LayerNorm::new(store, &n("norm2"), d)?,
                ff1: Linear::new(store, &n("ff1"), d, cfg.ffn_width(), rng)?,
                ff2: Linear::new(store, &n("ff2"), cfg.ffn_width(), d, rng)?,
            });
        }
        let out_norm = LayerNorm::new(store, &name("out_norm"), d)?;
        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            input_dim,
            views,
            gate,
            view_norm,
            cls,
            pos,
            modality,
            prompts,
            blocks,
            out_norm,
        })
    }

    pub fn gate_ids(&self) -> (ParamId, ParamId) {
        (self.gate.weight, self.gate.bias)
    }

    /// Gated multi-view embedding. Input `[B, input_dim]`; output
    /// `[B·z, d_e]` where row `b·z + i` is view `i` of sample `b`.
    pub fn mvge<'a, T: Scalar>(&self, g: &mut Graph<'a, T>, store: &'a ParamStore<T>, x: Var) -> Result<Var> {
        let [b, cols] = g.shape(x);
        if cols != self.input_dim {
            return Err(Error::shape(
                "encoder",
                format!("input has {cols} columns, encoder expects {}", self.input_dim),
            ));
        }
        let e = self.views.forward(g, store, x)?;
        let gate_pre = self.gate.forward(g, store, x)?;
        let gate = g.sigmoid(gate_pre);
        let tiled = g.concat(&vec![gate; self.cfg.views], 1)?;
        let gated = g.hadamard(e, tiled)?;
        let normed = self.view_norm.forward(g, store, gated)?;
        let act = g.relu(normed);
        g.reshape(act, b * self.cfg.views, self.cfg.d_e)
    }

    /// Builds `[E_cls, e_1..e_z, prompts] + E_pos + E_mod` for every sample,
    /// returning `[B·T, d_e]` with each sequence on `T` consecutive rows.
    pub fn assemble<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        tokens: Var,
        batch: usize,
    ) -> Result<Var> {
        let z = self.cfg.views;
        let t = self.cfg.seq_len();
        let cls = g.param(store, self.cls);
        let mut sources = vec![cls, tokens];
        if let Some(p) = self.prompts {
            sources.push(g.param(store, p));
        }
        let mut index = Vec::with_capacity(batch * t);
        for b in 0..batch {
            index.push((0, 0));
            index.extend((0..z).map(|i| (1, b * z + i)));
            index.extend((0..self.cfg.prompts).map(|p| (2, p)));
        }
        let seq = g.gather_rows(&sources, &index)?;
        let pos = g.param(store, self.pos);
        let pos_index: Vec<_> = (0..batch).flat_map(|_| (0..t).map(|r| (0, r))).collect();
        let pos = g.gather_rows(&[pos], &pos_index)?;
        let seq = g.add(seq, pos)?;
        let m = g.param(store, self.modality);
        g.add_bias(seq, m)
    }

    /// Full encoder: `[B, input_dim]` to class-token features `[B, d_e]`.
    pub fn forward<'a, T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let batch = g.shape(x)[0];
        let t = self.cfg.seq_len();
        let tokens = self.mvge(g, store, x)?;
        let mut h = self.assemble(g, store, tokens, batch)?;
        let p = self.cfg.dropout;
        for blk in &self.blocks {
            let n = blk.norm1.forward(g, store, h)?;
            let q = blk.q.forward(g, store, n)?;
            let k = blk.k.forward(g, store, n)?;
            let v = blk.v.forward(g, store, n)?;
            let a = g.attention(q, k, v, self.cfg.heads, t)?;
            let o = blk.o.forward(g, store, a)?;
            let o = g.dropout(o, p, rng)?;
            h = g.add(h, o)?;
            let n = blk.norm2.forward(g, store, h)?;
            let f = blk.ff1.forward(g, store, n)?;
            let f = g.relu(f);
            let f = blk.ff2.forward(g, store, f)?;
            let f = g.dropout(f, p, rng)?;
            h = g.add(h, f)?;
        }
        let h = self.out_norm.forward(g, store, h)?;
        let cls_rows: Vec<_> = (0..batch).map(|b| (0, b * t)).collect();
        g.gather_rows(&[h], &cls_rows)
    }
}

/// Flattens same-shape clips of one modality into `[B, C·S]`.
pub fn clips_to_tensor<T: Scalar>(clips: &[&Clip]) -> Result<Tensor<T>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty clip batch".into()))?;
    let width = first.data.len();
    let mut data = Vec::with_capacity(clips.len() * width);
    for c in clips {
        if c.modality != first.modality {
            return Err(Error::InvalidArgument(format!(
                "mixed modalities {} and {} in one encoder batch",
                first.modality, c.modality
            )));
        }
        if c.data.len() != width || c.channels != first.channels {
            return Err(Error::shape("encoder", "clips differ in shape"));
        }
        data.extend(c.data.iter().map(|&v| T::lit(f64::from(v))));
    }
    Tensor::new(clips.len(), width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BN_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            views: 3,
            d_e: 8,
            heads: 2,
            blocks: 2,
            ffn_dim: 12,
            prompts: 2,
            dropout: 0.1,
        }
    }

    fn build(cfg: &EncoderConfig, input: usize, seed: u64) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut store, "enc_eeg_5s", input, cfg, &mut rng).unwrap();
        (store, enc)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
        store.get(store.id(name).unwrap()).clone()
    }

    #[test]
    fn mvge_matches_loop_oracle() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg, 5, 1);
        let x = random_input(4, 5, 2);
        let mut g = Graph::new(true);
        let xv = g.constant(x.clone());
        let out = enc.mvge(&mut g, &store, xv).unwrap();
        let got = g.tensor(out);
        assert_eq!(got.shape(), [4 * 3, 8]);

        let w = param(&store, "enc_eeg_5s.views.weight");
        let bias = param(&store, "enc_eeg_5s.views.bias");
        let gw = param(&store, "enc_eeg_5s.gate.weight");
        let gb = param(&store, "enc_eeg_5s.gate.bias");
        let gamma = param(&store, "enc_eeg_5s.view_bn.gamma");
        let beta = param(&store, "enc_eeg_5s.view_bn.beta");
        let (b, z, d) = (4, 3, 8);
        // Gated views: gate_j · (x·W_i + b_i)_j.
        let mut gated = vec![vec![vec![0.0; d]; z]; b];
        for s in 0..b {
            for j in 0..d {
                let mut pre = gb.get(0, j);
                for k in 0..5 {
                    pre += x.get(s, k) * gw.get(k, j);
                }
                let gate = 1.0 / (1.0 + (-pre).exp());
                for i in 0..z {
                    let mut e = bias.get(0, i * d + j);
                    for k in 0..5 {
                        e += x.get(s, k) * w.get(k, i * d + j);
                    }
                    gated[s][i][j] = gate * e;
                }
            }
        }
        for i in 0..z {
            for j in 0..d {
                let col: Vec<f64> = (0..b).map(|s| gated[s][i][j]).collect();
                let mean = col.iter().sum::<f64>() / b as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
                for s in 0..b {
                    let bn = (gated[s][i][j] - mean) / (var + BN_EPS).sqrt() * gamma.get(0, i * d + j)
                        + beta.get(0, i * d + j);
                    let want = bn.max(0.0);
                    assert!((got.get(s * z + i, j) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn closed_gate_suppresses_all_views() {
        let cfg = small_cfg();
        let (mut store, enc) = build(&cfg, 5, 3);
        let (gw, gb) = enc.gate_ids();
        *store.get_mut(gw) = Tensor::zeros(5, 8);
        *store.get_mut(gb) = Tensor::full(1, 8, -40.0);
        let mut g = Graph::new(true);
        let x = g.constant(random_input(3, 5, 4));
        let out = enc.mvge(&mut g, &store, x).unwrap();
        // BN of an (almost) constant zero column yields beta = 0; ReLU keeps 0.
        assert!(g.value(out).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn single_view_yields_one_token() {
        let cfg = EncoderConfig {
            views: 1,
            ..small_cfg()
        };
        let (store, enc) = build(&cfg, 5, 5);
        let mut g = Graph::new(true);
        let x = g.constant(random_input(3, 5, 6));
        let out = enc.mvge(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(out), [3, 8]);
    }

    #[test]
    fn assembly_layout() {
        let cfg = small_cfg();
        let (mut store, enc) = build(&cfg, 5, 7);
        *store.get_mut(enc.pos) = Tensor::zeros(cfg.seq_len(), 8);
        *store.get_mut(enc.modality) = Tensor::zeros(1, 8);
        let mut g = Graph::new(false);
        let tokens = g.constant(Tensor::zeros(2 * 3, 8));
        let seq = enc.assemble(&mut g, &store, tokens, 2).unwrap();
        let t = cfg.seq_len();
        assert_eq!(g.shape(seq), [2 * t, 8]);
        let seq = g.tensor(seq);
        let cls = store.get(enc.cls);
        assert_eq!(seq.row(0), cls.row(0));
        assert_eq!(seq.row(t), cls.row(0));
        let prompts = store.get(enc.prompts.unwrap()).clone();
        assert_eq!(seq.row(t - 1), prompts.row(1));

        // A modality embedding shifts every position by the same vector.
        let shift = Tensor::from_fn(1, 8, |_, j| j as f64 * 0.5 - 1.0);
        *store.get_mut(enc.modality) = shift.clone();
        let mut g = Graph::new(false);
        let tokens = g.constant(Tensor::zeros(2 * 3, 8));
        let shifted = enc.assemble(&mut g, &store, tokens, 2).unwrap();
        let shifted = g.tensor(shifted);
        for r in 0..2 * t {
            for j in 0..8 {
                assert!((shifted.get(r, j) - seq.get(r, j) - shift.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_hand_case() {
        // Q = K = I, one head, d = 2: weights softmax([1, 0]/√2) per row.
        let mut g = Graph::<f64>::new(false);
        let eye = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = g.constant(eye.clone());
        let k = g.constant(eye);
        let v = g.constant(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap());
        let out = g.attention(q, k, v, 1, 2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let hi = s.exp() / (s.exp() + 1.0);
        let lo = 1.0 - hi;
        let want = [hi + 3.0 * lo, 2.0 * hi + 5.0 * lo, lo + 3.0 * hi, 2.0 * lo + 5.0 * hi];
        for (got, want) in g.value(out).iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut g = Graph::<f64>::new(false);
        let q = g.constant(Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64));
        let k = g.constant(Tensor::full(3, 4, 0.7));
        let v = g.constant(Tensor::from_fn(3, 4, |r, c| (r + c) as f64));
        let out = g.attention(q, k, v, 2, 3).unwrap();
        let out = g.tensor(out);
        for r in 0..3 {
            for c in 0..4 {
                let mean = (0..3).map(|rr| (rr + c) as f64).sum::<f64>() / 3.0;
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    fn encode(store: &ParamStore<f64>, enc: &Encoder, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new(false);
        let xv = g.constant(x.clone());
        let out = enc
            .forward(&mut g, store, xv, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        g.tensor(out)
    }

    #[test]
    fn eval_encoding_is_row_wise() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg, 6, 8);
        let mut x = random_input(4, 6, 9);
        let row0 = x.row(0).to_vec();
        x.data_mut()[18..24].copy_from_slice(&row0);
        let out = encode(&store, &enc, &x);
        assert_eq!(out.shape(), [4, 8]);
        assert_eq!(out.row(0), out.row(3));
        assert_eq!(encode(&store, &enc, &x).data(), out.data());

        let perm = [2, 0, 3, 1];
        let shuffled = Tensor::from_fn(4, 6, |r, c| x.get(perm[r], c));
        let out_p = encode(&store, &enc, &shuffled);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((out_p.get(r, c) - out.get(p, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let cfg = small_cfg();
        let (store, enc) = build(&cfg, 6, 10);
        let mut g = Graph::new(true);
        let x = g.constant(random_input(5, 6, 11));
        let h = enc
            .forward(&mut g, &store, x, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let w = g.constant(random_input(8, 1, 12));
        let y = g.matmul(h, w).unwrap();
        let loss = g.mean(y, 0).unwrap();
        let grads = g.backward(loss).unwrap();
        for id in store.trainable() {
            let gr = grads
                .param(id)
                .unwrap_or_else(|| panic!("no gradient for {}", store.name(id)));
            assert!(gr.iter().any(|v| v.abs() > 0.0), "zero gradient for {}", store.name(id));
        }
    }

    #[test]
    fn mixed_modalities_are_rejected() {
        let data = vec![0.0f32; 8];
        let key = crate::dataset::ClipKey {
            modality: 0,
            subject: 0,
            stimulus: 0,
        };
        let a = crate::dataset::segment_trial(&data, 1, 8, 1.0, key).unwrap().remove(0);
        let b = Clip {
            modality: 1,
            ..a.clone()
        };
        assert!(clips_to_tensor::<f64>(&[&a, &b]).is_err());
        assert_eq!(clips_to_tensor::<f64>(&[&a, &a]).unwrap().shape(), [2, 8]);
    }

    #[test]
    fn invalid_configs() {
        let bad = EncoderConfig {
            d_e: 10,
            heads: 4,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(encoder_prefix("eeg", 5.0), "enc_eeg_5s");
        assert_eq!(encoder_prefix("pps", 0.5), "enc_pps_0.5s");
    }
}
