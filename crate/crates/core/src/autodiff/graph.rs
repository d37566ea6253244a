//! Tape-based reverse-mode differentiation over two-dimensional tensors.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameter
//! nodes borrow their values from a [`ParamStore`], so building a graph never
//! copies weights. [`Graph::backward`] walks the tape in reverse from a scalar
//! node and returns the accumulated [`Gradients`].
//!
//! Broadcasting is limited to bias addition; everything else requires exact
//! shape agreement.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::params::{BnUpdate, ParamId, ParamStore};
use super::tensor::{gemm, Scalar, Tensor, View, ViewMut};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Lower clamp on row norms in [`Graph::row_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    GatherRows(Vec<Var>, Vec<(usize, usize)>),
    Reshape(Var),
    SliceCols(Var, usize),
    RowNormalize(Var, Vec<T>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<T>,
    },
    MaskedXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: [usize; 2],
    op: Op<T>,
    needs_grad: bool,
}

/// Computation graph. `'a` is the lifetime of the borrowed parameter store.
pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    training: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Vec<T>>,
    inputs: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient with respect to a node created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.inputs.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn softmax_groups(shape: [usize; 2], axis: usize) -> (usize, usize, usize, usize) {
    // (group count, group length, stride between groups, stride within group)
    if axis == 1 {
        (shape[0], shape[1], shape[1], 1)
    } else {
        (shape[1], shape[0], 1, shape[1])
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, g: Vec<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn view<T>(data: &[T], offset: usize, rs: usize, cs: usize) -> View<'_, T> {
    View { data, offset, rs, cs }
}

fn view_mut<T>(data: &mut [T], offset: usize, rs: usize, cs: usize) -> ViewMut<'_, T> {
    ViewMut { data, offset, rs, cs }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: [usize; 2], op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape[0] * shape[1]);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape();
        self.push(t.into_data(), shape, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape();
        self.push(t.into_data(), shape, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape(),
            op: Op::Param(id),
            needs_grad: !store.is_frozen(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let s = self.shape(v);
        Tensor::new(s[0], s[1], self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(value, self.shape(x), op, ng)
    }

    // ---- linear algebra -------------------------------------------------

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{sa:?}{} x {sb:?}{}",
                    if ta { "ᵀ" } else { "" },
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let (rsa, csa) = if ta { (1, sa[1]) } else { (sa[1], 1) };
        let (rsb, csb) = if tb { (1, sb[1]) } else { (sb[1], 1) };
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            view(self.value(a), 0, rsa, csa),
            view(self.value(b), 0, rsb, csb),
            T::zero(),
            view_mut(&mut out, 0, n, 1),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, [m, n], Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let v = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(out, [c, r], Op::Transpose(x), ng)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, s, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, s, Op::Sub(a, b), ng))
    }

    /// `x [m×n] + bias [1×n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(bias) != [1, n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", [m, n], self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, [m, n], Op::AddBias(x, bias), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("hadamard", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, s, Op::Hadamard(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// Softmax along `axis` (1: each row sums to one; 0: each column does).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("softmax axis {axis}")));
        }
        let shape = self.shape(x);
        let (groups, len, gstride, estride) = softmax_groups(shape, axis);
        let mut out = self.value(x).to_vec();
        for g in 0..groups {
            let base = g * gstride;
            let mut mx = T::neg_infinity();
            for e in 0..len {
                mx = mx.max(out[base + e * estride]);
            }
            let mut sum = T::zero();
            for e in 0..len {
                let i = base + e * estride;
                out[i] = (out[i] - mx).exp();
                sum += out[i];
            }
            for e in 0..len {
                out[base + e * estride] /= sum;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, shape, Op::Softmax(x, axis), ng))
    }

    // ---- structural -----------------------------------------------------

    /// Concatenate along `axis` (0: stack rows, 1: side by side).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let s0 = self.shape(first);
        let mut out = Vec::new();
        let shape = match axis {
            0 => {
                let mut rows = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s[1] != s0[1] {
                        return Err(Error::shape("concat", format!("{s0:?} vs {s:?} on axis 0")));
                    }
                    rows += s[0];
                    out.extend_from_slice(self.value(p));
                }
                [rows, s0[1]]
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s[0] != s0[0] {
                        return Err(Error::shape("concat", format!("{s0:?} vs {s:?} on axis 1")));
                    }
                    cols += s[1];
                }
                out.reserve(s0[0] * cols);
                for r in 0..s0[0] {
                    for &p in parts {
                        let c = self.shape(p)[1];
                        out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                    }
                }
                [s0[0], cols]
            }
            _ => return Err(Error::InvalidArgument(format!("concat axis {axis}"))),
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, shape, Op::Concat(parts.to_vec(), axis), ng))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let [r, c] = self.shape(x);
        let v = self.value(x);
        let (out, shape) = match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for row in v.chunks(c.max(1)) {
                    for (o, &e) in out.iter_mut().zip(row) {
                        *o += e;
                    }
                }
                if mean {
                    let n = T::lit(r as f64);
                    out.iter_mut().for_each(|o| *o /= n);
                }
                (out, [1, c])
            }
            1 => {
                let n = T::lit(c as f64);
                let out = v
                    .chunks(c.max(1))
                    .take(r)
                    .map(|row| {
                        let s: T = row.iter().copied().sum();
                        if mean {
                            s / n
                        } else {
                            s
                        }
                    })
                    .collect();
                (out, [r, 1])
            }
            _ => return Err(Error::InvalidArgument(format!("reduce axis {axis}"))),
        };
        let ng = self.ng(x);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(out, shape, op, ng))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![s], [1, 1], Op::SumAll(x), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", format!("[{r}, {c}] -> [{rows}, {cols}]")));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(out, [rows, cols], Op::Reshape(x), ng))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, [r, w], Op::SliceCols(x, start), ng))
    }

    /// Builds a matrix whose row `i` is row `index[i].1` of `sources[index[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let cols = match sources.first() {
            Some(&s) => self.shape(s)[1],
            None => return Err(Error::InvalidArgument("gather_rows without sources".into())),
        };
        if sources.iter().any(|&s| self.shape(s)[1] != cols) {
            return Err(Error::shape("gather_rows", "sources differ in column count"));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &(src, row) in index {
            let s = *sources
                .get(src)
                .ok_or_else(|| Error::shape("gather_rows", format!("source {src} out of range")))?;
            if row >= self.shape(s)[0] {
                return Err(Error::shape("gather_rows", format!("row {row} out of range")));
            }
            out.extend_from_slice(&self.value(s)[row * cols..(row + 1) * cols]);
        }
        let ng = sources.iter().any(|&s| self.ng(s));
        Ok(self.push(
            out,
            [index.len(), cols],
            Op::GatherRows(sources.to_vec(), index.to_vec()),
            ng,
        ))
    }

    /// Divides each row by its Euclidean norm (clamped below at [`NORM_EPS`]).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let [r, c] = self.shape(x);
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for row in v.chunks(c.max(1)).take(r) {
            let n = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(T::lit(NORM_EPS));
            norms.push(n);
            out.extend(row.iter().map(|&e| e / n));
        }
        let ng = self.ng(x);
        self.push(out, [r, c], Op::RowNormalize(x, norms), ng)
    }

    // ---- normalization and regularization --------------------------------

    /// Batch normalization over rows (per-column statistics).
    ///
    /// Train mode normalizes with batch statistics and records a running
    /// statistic update (unbiased variance); eval mode uses the stored running
    /// statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let [n, f] = self.shape(x);
        if self.shape(gamma) != [1, f] || self.shape(beta) != [1, f] {
            return Err(Error::shape("batch_norm", "affine parameters must be [1, features]"));
        }
        let eps = T::lit(BN_EPS);
        let v = self.value(x);
        let mut pending = None;
        let (mean, var) = if self.training {
            if n < 2 {
                return Err(Error::shape("batch_norm", "train mode needs a batch of at least 2"));
            }
            let nn = T::lit(n as f64);
            let mut mean = vec![T::zero(); f];
            for row in v.chunks(f) {
                for (m, &e) in mean.iter_mut().zip(row) {
                    *m += e;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nn);
            let mut var = vec![T::zero(); f];
            for row in v.chunks(f) {
                for j in 0..f {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= nn);
            let unbiased = var.iter().map(|&s| s * nn / (nn - T::one())).collect();
            pending = Some(BnUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean.clone(),
                batch_var: unbiased,
            });
            (mean, var)
        } else {
            (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(n * f);
        let mut out = Vec::with_capacity(n * f);
        for row in v.chunks(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let train = self.training;
        if let Some(u) = pending {
            self.bn_updates.push(u);
        }
        Ok(self.push(
            out,
            [n, f],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        ))
    }

    /// Layer normalization over columns (per-row statistics).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [n, f] = self.shape(x);
        if self.shape(gamma) != [1, f] || self.shape(beta) != [1, f] {
            return Err(Error::shape("layer_norm", "affine parameters must be [1, features]"));
        }
        let eps = T::lit(LN_EPS);
        let ff = T::lit(f as f64);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(n * f);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * f);
        for row in self.value(x).chunks(f.max(1)).take(n) {
            let mean = row.iter().copied().sum::<T>() / ff;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / ff;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..f {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            [n, f],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout p = {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let ng = self.ng(x);
        Ok(self.push(out, self.shape(x), Op::Dropout(x, mask), ng))
    }

    // ---- fused kernels --------------------------------------------------

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with each sequence occupying `seq`
    /// consecutive rows. Head `h` uses columns `h·d/heads..(h+1)·d/heads`;
    /// scores are scaled by `1/√(d/heads)`. Head outputs are written back into
    /// their column blocks, i.e. concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let s = self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let [rows, d] = s;
        if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(Error::shape(
                "attention",
                format!("[{rows}, {d}] with {heads} heads and sequence length {seq}"),
            ));
        }
        let dh = d / heads;
        let batch = rows / seq;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let poff = (b * heads + h) * seq * seq;
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    view(qv, off, d, 1),
                    view(kv, off, 1, d),
                    T::zero(),
                    view_mut(&mut probs, poff, seq, 1),
                );
                for row in probs[poff..poff + seq * seq].chunks_mut(seq) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                        sum += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= sum);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    view(&probs, poff, seq, 1),
                    view(vv, off, d, 1),
                    T::zero(),
                    view_mut(&mut out, off, d, 1),
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            [rows, d],
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            ng,
        ))
    }

    /// Per-row cross-entropy over a restricted partition function:
    /// `loss_r = −x[r, t_r] + log Σ_{k : mask[r,k]} exp(x[r, k])`.
    ///
    /// `mask = None` includes every column. The target itself may be masked
    /// out of the denominator. Returns `[rows, 1]`.
    pub fn masked_xent(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let [r, c] = self.shape(logits);
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape("masked_xent", "one in-range target per row required"));
        }
        if mask.is_some_and(|m| m.len() != r * c) {
            return Err(Error::shape("masked_xent", "mask must match logits"));
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); r * c];
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let inc = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let row = &x[i * c..(i + 1) * c];
            let mx = (0..c)
                .filter(|&j| inc(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                return Err(Error::InvalidArgument(format!("row {i} has an empty partition")));
            }
            let mut sum = T::zero();
            for j in (0..c).filter(|&j| inc(j)) {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            out.push(mx + sum.ln() - row[targets[i]]);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            [r, 1],
            Op::MaskedXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut result = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, gy, &mut grads, &mut result, i);
        }
        Ok(result)
    }

    fn backward_node(
        &self,
        node: &Node<'a, T>,
        gy: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        result: &mut Gradients<T>,
        index: usize,
    ) {
        let [rows, cols] = node.shape;
        match &node.op {
            Op::Leaf => {
                result.inputs.insert(index, gy);
            }
            Op::Param(id) => match result.params.get_mut(id) {
                Some(acc) => acc.iter_mut().zip(gy).for_each(|(a, g)| *a += g),
                None => {
                    result.params.insert(*id, gy);
                }
            },
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = cols;
                let (rsa, csa) = if ta { (1, sa[1]) } else { (sa[1], 1) };
                let (rsb, csb) = if tb { (1, sb[1]) } else { (sb[1], 1) };
                if self.ng(a) {
                    // d op(a) = gy · op(b)ᵀ, written transposed when `ta`.
                    let mut da = vec![T::zero(); sa[0] * sa[1]];
                    let (rsc, csc) = if ta { (1, m) } else { (k, 1) };
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        view(&gy, 0, n, 1),
                        view(self.value(b), 0, csb, rsb),
                        T::zero(),
                        view_mut(&mut da, 0, rsc, csc),
                    );
                    accumulate(grads, a.0, da);
                }
                if self.ng(b) {
                    // d op(b) = op(a)ᵀ · gy, written transposed when `tb`.
                    let mut db = vec![T::zero(); sb[0] * sb[1]];
                    let (rsc, csc) = if tb { (1, k) } else { (n, 1) };
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        view(self.value(a), 0, csa, rsa),
                        view(&gy, 0, n, 1),
                        T::zero(),
                        view_mut(&mut db, 0, rsc, csc),
                    );
                    accumulate(grads, b.0, db);
                }
            }
            &Op::Add(a, b) => {
                if self.ng(a) {
                    accumulate(grads, a.0, gy.clone());
                }
                if self.ng(b) {
                    accumulate(grads, b.0, gy);
                }
            }
            &Op::Sub(a, b) => {
                if self.ng(a) {
                    accumulate(grads, a.0, gy.clone());
                }
                if self.ng(b) {
                    accumulate(grads, b.0, gy.into_iter().map(|g| -g).collect());
                }
            }
            &Op::AddBias(x, bias) => {
                if self.ng(bias) {
                    let mut db = vec![T::zero(); cols];
                    for row in gy.chunks(cols.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    accumulate(grads, bias.0, db);
                }
                if self.ng(x) {
                    accumulate(grads, x.0, gy);
                }
            }
            &Op::Hadamard(a, b) => {
                if self.ng(a) {
                    let d = gy.iter().zip(self.value(b)).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, a.0, d);
                }
                if self.ng(b) {
                    let d = gy.iter().zip(self.value(a)).map(|(&g, &v)| g * v).collect();
                    accumulate(grads, b.0, d);
                }
            }
            &Op::Scale(x, s) => accumulate(grads, x.0, gy.into_iter().map(|g| g * s).collect()),
            &Op::Relu(x) => {
                let d = gy
                    .iter()
                    .zip(self.value(x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, x.0, d);
            }
            &Op::Sigmoid(x) => {
                let d = gy
                    .iter()
                    .zip(node.value.iter())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                accumulate(grads, x.0, d);
            }
            &Op::Softmax(x, axis) => {
                let (groups, len, gstride, estride) = softmax_groups(node.shape, axis);
                let y = &node.value;
                let mut d = vec![T::zero(); rows * cols];
                for g in 0..groups {
                    let base = g * gstride;
                    let dot: T = (0..len).map(|e| gy[base + e * estride] * y[base + e * estride]).sum();
                    for e in 0..len {
                        let i = base + e * estride;
                        d[i] = y[i] * (gy[i] - dot);
                    }
                }
                accumulate(grads, x.0, d);
            }
            &Op::Transpose(x) => {
                let mut d = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        d[j * rows + i] = gy[i * cols + j];
                    }
                }
                accumulate(grads, x.0, d);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let [pr, pc] = self.shape(p);
                    if self.ng(p) {
                        let d = if *axis == 0 {
                            gy[offset * cols..(offset + pr) * cols].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(pr * pc);
                            for r in 0..pr {
                                d.extend_from_slice(&gy[r * cols + offset..r * cols + offset + pc]);
                            }
                            d
                        };
                        accumulate(grads, p.0, d);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            &Op::Sum(x, axis) | &Op::Mean(x, axis) => {
                let [xr, xc] = self.shape(x);
                let denom = match (&node.op, axis) {
                    (Op::Mean(..), 0) => T::lit(xr as f64),
                    (Op::Mean(..), _) => T::lit(xc as f64),
                    _ => T::one(),
                };
                let mut d = Vec::with_capacity(xr * xc);
                for r in 0..xr {
                    for c in 0..xc {
                        let g = if axis == 0 { gy[c] } else { gy[r] };
                        d.push(g / denom);
                    }
                }
                accumulate(grads, x.0, d);
            }
            &Op::SumAll(x) => {
                let n = self.value(x).len();
                accumulate(grads, x.0, vec![gy[0]; n]);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, f) = (rows, cols);
                let mut sum_g = vec![T::zero(); f];
                let mut sum_gx = vec![T::zero(); f];
                for (row_g, row_h) in gy.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        sum_g[j] += row_g[j];
                        sum_gx[j] += row_g[j] * row_h[j];
                    }
                }
                if self.ng(*x) {
                    let g = self.value(*gamma);
                    let nn = T::lit(n as f64);
                    let mut d = Vec::with_capacity(n * f);
                    for (row_g, row_h) in gy.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            let v = if *train {
                                g[j] * inv_std[j] / nn * (nn * row_g[j] - sum_g[j] - row_h[j] * sum_gx[j])
                            } else {
                                g[j] * inv_std[j] * row_g[j]
                            };
                            d.push(v);
                        }
                    }
                    accumulate(grads, x.0, d);
                }
                if self.ng(*gamma) {
                    accumulate(grads, gamma.0, sum_gx);
                }
                if self.ng(*beta) {
                    accumulate(grads, beta.0, sum_g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, f) = (rows, cols);
                let g = self.value(*gamma);
                if self.ng(*x) {
                    let ff = T::lit(f as f64);
                    let mut d = Vec::with_capacity(n * f);
                    for r in 0..n {
                        let gr = &gy[r * f..(r + 1) * f];
                        let hr = &xhat[r * f..(r + 1) * f];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..f {
                            let gg = gr[j] * g[j];
                            s1 += gg;
                            s2 += gg * hr[j];
                        }
                        for j in 0..f {
                            let gg = gr[j] * g[j];
                            d.push(inv_std[r] / ff * (ff * gg - s1 - hr[j] * s2));
                        }
                    }
                    accumulate(grads, x.0, d);
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); f];
                    let mut db = vec![T::zero(); f];
                    for (row_g, row_h) in gy.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            dg[j] += row_g[j] * row_h[j];
                            db[j] += row_g[j];
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(grads, gamma.0, dg);
                    }
                    if self.ng(*beta) {
                        accumulate(grads, beta.0, db);
                    }
                }
            }
            Op::Dropout(x, mask) => accumulate(grads, x.0, gy.iter().zip(mask).map(|(&g, &m)| g * m).collect()),
            Op::GatherRows(sources, index) => {
                let mut ds: Vec<Option<Vec<T>>> = sources
                    .iter()
                    .map(|&s| self.ng(s).then(|| vec![T::zero(); self.value(s).len()]))
                    .collect();
                for (i, &(src, row)) in index.iter().enumerate() {
                    if let Some(d) = &mut ds[src] {
                        let dst = &mut d[row * cols..(row + 1) * cols];
                        dst.iter_mut()
                            .zip(&gy[i * cols..(i + 1) * cols])
                            .for_each(|(a, &g)| *a += g);
                    }
                }
                for (&s, d) in sources.iter().zip(ds) {
                    if let Some(d) = d {
                        accumulate(grads, s.0, d);
                    }
                }
            }
            &Op::Reshape(x) => accumulate(grads, x.0, gy),
            &Op::SliceCols(x, start) => {
                let [xr, xc] = self.shape(x);
                let mut d = vec![T::zero(); xr * xc];
                for r in 0..xr {
                    d[r * xc + start..r * xc + start + cols].copy_from_slice(&gy[r * cols..(r + 1) * cols]);
                }
                accumulate(grads, x.0, d);
            }
            Op::RowNormalize(x, norms) => {
                let y = &node.value;
                let mut d = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gy[r * cols..(r + 1) * cols];
                    if norms[r] > T::lit(NORM_EPS) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        d.extend((0..cols).map(|j| (gr[j] - yr[j] * dot) / norms[r]));
                    } else {
                        d.extend(gr.iter().map(|&g| g / norms[r]));
                    }
                }
                accumulate(grads, x.0, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => {
                let (heads, seq) = (*heads, *seq);
                let d = cols;
                let dh = d / heads;
                let batch = rows / seq;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut ds = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let poff = (b * heads + h) * seq * seq;
                        let p = &probs[poff..poff + seq * seq];
                        // dV = Pᵀ·dO
                        gemm(
                            seq,
                            seq,
                            dh,
                            T::one(),
                            view(probs, poff, 1, seq),
                            view(&gy, off, d, 1),
                            T::zero(),
                            view_mut(&mut dv, off, d, 1),
                        );
                        // dP = dO·Vᵀ
                        gemm(
                            seq,
                            dh,
                            seq,
                            T::one(),
                            view(&gy, off, d, 1),
                            view(vv, off, 1, d),
                            T::zero(),
                            view_mut(&mut ds, 0, seq, 1),
                        );
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dr = &mut ds[r * seq..(r + 1) * seq];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (x, &pp) in dr.iter_mut().zip(pr) {
                                *x = pp * (*x - dot);
                            }
                        }
                        gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            view(&ds, 0, seq, 1),
                            view(kv, off, d, 1),
                            T::zero(),
                            view_mut(&mut dq, off, d, 1),
                        );
                        gemm(
                            seq,
                            seq,
                            dh,
                            scale,
                            view(&ds, 0, 1, seq),
                            view(qv, off, d, 1),
                            T::zero(),
                            view_mut(&mut dk, off, d, 1),
                        );
                    }
                }
                if self.ng(*q) {
                    accumulate(grads, q.0, dq);
                }
                if self.ng(*k) {
                    accumulate(grads, k.0, dk);
                }
                if self.ng(*v) {
                    accumulate(grads, v.0, dv);
                }
            }
            Op::MaskedXent { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= T::one();
                    for j in 0..c {
                        d[r * c + j] *= gy[r];
                    }
                }
                accumulate(grads, logits.0, d);
            }
        }
    }
}
