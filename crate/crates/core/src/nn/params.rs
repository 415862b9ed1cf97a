use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{R2dError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Weight decay applies to everything except normalization affine terms.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Owner of every learnable tensor and non-learnable buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    names: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        kind: ParamKind,
    ) -> ParamId {
        let name = name.into();
        let id = self.params.len();
        let prev = self.names.insert(name.clone(), Slot::Param(id));
        assert!(prev.is_none(), "duplicate tensor name {name}");
        self.params.push(Param {
            name,
            value,
            kind,
            trainable: true,
        });
        ParamId(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        let name = name.into();
        let id = self.buffers.len();
        let prev = self.names.insert(name.clone(), Slot::Buffer(id));
        assert!(prev.is_none(), "duplicate tensor name {name}");
        self.buffers.push(Buffer { name, value });
        BufferId(id)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &Buffer)> {
        self.buffers
            .iter()
            .enumerate()
            .map(|(i, b)| (BufferId(i), b))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    /// Toggle trainability of every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.value.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }

    /// All parameters and buffers by name, sorted.
    pub fn named_tensors(&self) -> BTreeMap<String, &Tensor> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            out.insert(p.name.clone(), &p.value);
        }
        for b in &self.buffers {
            out.insert(b.name.clone(), &b.value);
        }
        out
    }

    /// Overwrite every tensor from `named`. The name sets and shapes must match exactly.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        if named.len() != self.names.len() {
            return Err(R2dError::Checkpoint(format!(
                "tensor count mismatch: archive has {}, model has {}",
                named.len(),
                self.names.len()
            )));
        }
        for (name, t) in named {
            let slot = self
                .names
                .get(name)
                .ok_or_else(|| R2dError::Checkpoint(format!("unexpected tensor {name}")))?;
            let dst = match *slot {
                Slot::Param(i) => &mut self.params[i].value,
                Slot::Buffer(i) => &mut self.buffers[i].value,
            };
            if dst.dims() != t.dims() {
                return Err(R2dError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.dims(),
                    dst.dims()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Overwrite every tensor whose name starts with `prefix` from `named`,
    /// which must contain each of them with a matching shape. Returns the
    /// number of tensors copied.
    pub fn load_prefixed(
        &mut self,
        named: &BTreeMap<String, Tensor>,
        prefix: &str,
    ) -> Result<usize> {
        let mut n = 0;
        let slots: Vec<(String, Slot)> = self
            .names
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        for (name, slot) in slots {
            let t = named
                .get(&name)
                .ok_or_else(|| R2dError::Checkpoint(format!("archive lacks tensor {name}")))?;
            let dst = match slot {
                Slot::Param(i) => &mut self.params[i].value,
                Slot::Buffer(i) => &mut self.buffers[i].value,
            };
            if dst.dims() != t.dims() {
                return Err(R2dError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.dims(),
                    dst.dims()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
            n += 1;
        }
        Ok(n)
    }
}

/// He-normal initialization for a conv kernel `[out, in, k, k]`.
pub fn kaiming_normal(dims: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let fan_in = (dims[1] * dims[2] * dims[3]).max(1) as f64;
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..dims.iter().product::<usize>())
        .map(|_| normal.sample(rng) as f32)
        .collect();
    Tensor::from_vec(dims, data)
}
