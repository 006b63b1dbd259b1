//! Parameter storage and the convolutional building blocks shared by every
//! detector topology.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical dotted names
//! (`backbone.4.m.0.cv1.conv.weight`). Layers hold cheap clones of the
//! underlying [`Var`]s, so a store and the layers built from it always
//! observe the same values.

mod layers;
pub mod ops;

pub use layers::{BatchNorm, Bottleneck, C3k, C3k2, Conv2d, ConvBn, PairMix, Sppf};

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Forward-pass mode. Only batch normalization behaves differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics are used and running statistics are updated.
    Train,
    /// Running statistics are used; the forward pass is pure.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormWeight,
    NormBias,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Buffers are persisted in checkpoints but are not parameters: they are
    /// never optimized and are excluded from parameter counts.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        self.var.as_tensor()
    }

    pub fn numel(&self) -> usize {
        self.var.as_tensor().elem_count()
    }
}

/// Ordered map of named parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: String, tensor: Tensor, kind: ParamKind) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        self.entries.insert(
            name,
            Param {
                var: var.clone(),
                kind,
                trainable: !kind.is_buffer(),
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of parameters (buffers excluded), in construction order.
    pub fn param_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| !p.kind.is_buffer())
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Every named tensor, buffers included.
    pub fn all_names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Exact number of trainable + frozen scalars. Buffers are not counted.
    pub fn parameter_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| !p.kind.is_buffer())
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// Sum of parameter scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, p)| !p.kind.is_buffer() && n.starts_with(prefix))
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        p.trainable = trainable && !p.kind.is_buffer();
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = false;
            }
        }
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| !p.kind.is_buffer() && !p.trainable)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Overwrites a stored value in place. Shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::Load(format!("unknown parameter {name}")))?;
        if p.tensor().dims() != value.dims() {
            return Err(Error::Load(format!(
                "{name}: expected shape {:?}, got {:?}",
                p.tensor().dims(),
                value.dims()
            )));
        }
        let value = value.to_dtype(p.tensor().dtype())?;
        p.var.set(&value)?;
        Ok(())
    }

    /// Little-endian bytes of a stored tensor, for bitwise comparisons.
    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        tensor_bytes(p.tensor())
    }
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    let bytes = match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => {
            return Err(Error::config(format!("unsupported dtype {other:?}")));
        }
    };
    Ok(bytes)
}

/// Seeded parameter factory. Initialization order is construction order, so
/// two builds with the same seed produce identical stores.
pub struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Builder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(
        &mut self,
        name: String,
        shape: &[usize],
        bound: f64,
        kind: ParamKind,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.store.insert(name, t, kind)
    }

    pub fn constant(
        &mut self,
        name: String,
        shape: &[usize],
        value: f64,
        kind: ParamKind,
    ) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        self.store.insert(name, t, kind)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Joins a prefix and a child name with a dot, skipping empty prefixes.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Rounds `x` up to a multiple of `divisor`.
pub(crate) fn make_divisible(x: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    ((x / d).ceil() * d) as usize
}
