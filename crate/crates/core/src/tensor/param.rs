use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with a hierarchical name such as
/// `backbone.block1.conv1.weight`.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Frozen parameters are bound into graphs as constants and skipped by
    /// the optimizer.
    pub frozen: bool,
}

/// Owns every parameter and non-trainable buffer (batch-norm running
/// statistics) of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which would
    /// otherwise silently alias two distinct weights.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = vec![0.0; value.numel()];
        self.params.push(Parameter {
            name,
            value,
            grad,
            frozen: false,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn remove_buffer(&mut self, name: &str) -> Option<Tensor> {
        self.buffers.remove(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Named copies of every parameter and buffer under `prefix`, in name
    /// order. Parameters and buffers share one namespace.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.snapshot_where(|n| n.starts_with(prefix))
    }

    pub fn snapshot_where(&self, select: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            if select(&p.name) {
                out.insert(p.name.clone(), p.value.clone());
            }
        }
        for (name, t) in &self.buffers {
            if select(name) {
                out.insert(name.clone(), t.clone());
            }
        }
        out
    }

    /// Loads named tensors back. Every entry must name a known parameter
    /// (or a buffer slot) with a matching shape, and every parameter under
    /// `prefix` must be present; mismatches are reported together.
    pub fn restore(&mut self, prefix: &str, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        self.restore_where(|n| n.starts_with(prefix), entries)
    }

    /// [`ParamStore::restore`] over the names accepted by `select`.
    pub fn restore_where(&mut self, select: impl Fn(&str) -> bool, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut diffs = Vec::new();
        for (name, t) in entries {
            if !select(name) {
                continue;
            }
            match self.index.get(name) {
                Some(&i) => {
                    let have = self.params[i].value.shape();
                    if have != t.shape() {
                        diffs.push(format!("  {name}: shape {:?} in checkpoint, {have:?} in model", t.shape()));
                    }
                }
                None if is_buffer_name(name) => {}
                None => diffs.push(format!("  {name}: present in checkpoint, absent from model")),
            }
        }
        for p in &self.params {
            if select(&p.name) && !entries.contains_key(&p.name) {
                diffs.push(format!("  {}: present in model, absent from checkpoint", p.name));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::CheckpointMismatch { diffs });
        }
        for (name, t) in entries {
            if !select(name) {
                continue;
            }
            match self.index.get(name) {
                Some(&i) => self.params[i].value = t.clone(),
                None => {
                    self.buffers.insert(name.clone(), t.clone());
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}
