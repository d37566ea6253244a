use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics and other state that is saved but never receives gradient.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

/// Batch-norm running-statistic update produced by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Named parameters and buffers of one model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            kind,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, ParamKind::Buffer)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids of parameters the optimizer should update.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable && !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.frozen || p.kind == ParamKind::Buffer
    }

    /// Marks every parameter whose name starts with `prefix` as frozen or not.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn num_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Exponential moving average of batch statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: T) {
        let keep = T::one() - momentum;
        for u in updates {
            for (r, &b) in self.params[u.mean.0].tensor.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + momentum * b;
            }
            for (r, &b) in self.params[u.var.0].tensor.data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + momentum * b;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    kind: p.kind,
                    frozen: p.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values for every name present in both stores whose name starts
    /// with `prefix`. Returns the number of tensors copied.
    pub fn copy_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            if let Some(id) = self.id(&p.name) {
                let dst = &mut self.params[id.0].tensor;
                if dst.shape() != p.tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{}`: {:?} vs {:?}",
                        p.name,
                        dst.shape(),
                        p.tensor.shape()
                    )));
                }
                *dst = p.tensor.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}
