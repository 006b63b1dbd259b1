//! Checkpoints and checkpoint surgery: loading single-modality weights into
//! two-stream graphs by name mapping, branch duplication and input-channel
//! adaptation.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use indexmap::IndexMap;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::detector::{DetectModel, Modality, ModelSpec, Topology};
use crate::error::{Error, Result};
use crate::fusion::Model;
use crate::nn::{tensor_bytes, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";
/// Branch namespaces that map back onto a single-stream name.
const BRANCH_PREFIXES: [&str; 3] = ["rgb.", "ir.", "aux."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub in_channels: usize,
    /// Present for controllable fine-tuning graphs: the frozen modality.
    #[serde(default)]
    pub mcf_primary: Option<Modality>,
    /// Names of frozen parameters.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl CheckpointManifest {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            spec: spec.clone(),
            in_channels: spec.in_channels(),
            mcf_primary: None,
            frozen: Vec::new(),
        }
    }

    pub fn fusion_name(&self) -> String {
        match (self.mcf_primary, self.spec.topology) {
            (Some(p), _) => format!("mcf({})", p.name()),
            (None, Topology::Single(m)) => format!("single({})", m.name()),
            (None, Topology::Fused(f)) => f.name().to_string(),
        }
    }
}

/// Named tensors plus a manifest. Stored as one safetensors file whose
/// metadata holds the manifest as JSON; tensors are written in name order,
/// so equal contents give equal bytes.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, Tensor>,
    pub manifest: CheckpointManifest,
}

fn to_st_dtype(d: DType) -> Result<Dtype> {
    match d {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Load(format!("unsupported tensor dtype {other:?}"))),
    }
}

impl Checkpoint {
    /// Snapshot of every tensor in `store`, buffers included.
    pub fn from_store(store: &ParamStore, manifest: CheckpointManifest) -> Result<Self> {
        let tensors = store
            .iter()
            .map(|(n, p)| Ok((n.to_string(), p.tensor().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Self { tensors, manifest })
    }

    pub fn from_model(model: &Model) -> Result<Self> {
        Self::from_store(model.store(), model.manifest())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<u8>, Dtype, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, t)| Ok((n.clone(), tensor_bytes(t)?, to_st_dtype(t.dtype())?, t.dims().to_vec())))
            .collect::<Result<_>>()?;
        let views = raw
            .iter()
            .map(|(n, b, d, s)| Ok((n.as_str(), TensorView::new(*d, s.clone(), b)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&self.manifest)?)]);
        Ok(safetensors::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)?;
        let (_, meta) = SafeTensors::read_metadata(bytes)?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| Error::Load("checkpoint has no manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_str(text)
            .map_err(|e| Error::Load(format!("unreadable checkpoint manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let mut entries = st.tensors();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut tensors = IndexMap::new();
        for (name, view) in entries {
            let dtype = match view.dtype() {
                Dtype::F32 => DType::F32,
                Dtype::F64 => DType::F64,
                other => return Err(Error::Load(format!("{name}: unsupported dtype {other:?}"))),
            };
            let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), &Device::Cpu)?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors, manifest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads into a store whose names and shapes must match exactly.
    pub fn apply_exact(&self, store: &ParamStore) -> Result<()> {
        for name in store.all_names() {
            let Some(t) = self.tensors.get(&name) else {
                return Err(Error::Load(format!("checkpoint is missing tensor {name}")));
            };
            store.assign(&name, t)?;
        }
        if let Some(extra) = self.tensors.keys().find(|n| !store.contains(n)) {
            return Err(Error::Load(format!("checkpoint tensor {extra} has no counterpart in the model")));
        }
        Ok(())
    }

    /// Builds the graph described by the manifest and loads it exactly.
    pub fn build_model(&self) -> Result<Model> {
        if self.manifest.mcf_primary.is_some() {
            return Err(Error::Load(
                "checkpoint holds a controllable fine-tuning graph; load it with the MCF loader".into(),
            ));
        }
        let dtype = self.tensors.values().next().map_or(DType::F32, |t| t.dtype());
        let mut model = Model::with_dtype(&self.manifest.spec, 0, dtype)?;
        self.apply_exact(model.store())?;
        for name in &self.manifest.frozen {
            model.store_mut().set_trainable(name, false)?;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptStrategy {
    Average,
    CopyScaled,
}

impl AdaptStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AdaptStrategy::Average => "average",
            AdaptStrategy::CopyScaled => "copy_scaled",
        }
    }
}

impl std::str::FromStr for AdaptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "average" => Ok(AdaptStrategy::Average),
            "copy_scaled" => Ok(AdaptStrategy::CopyScaled),
            _ => Err(Error::config(format!("unknown adaptation strategy {s:?} (expected average or copy_scaled)"))),
        }
    }
}

fn tile_in(w: &Tensor, new_in: usize) -> Result<Tensor> {
    let cin = w.dim(1)?;
    let reps = new_in.div_ceil(cin);
    let tiled = Tensor::cat(&vec![w; reps], 1)?;
    Ok(tiled.narrow(1, 0, new_in)?)
}

/// Changes the input-channel count of a `[out, in, k, k]` kernel.
///
/// `CopyScaled` tiles the kernel along the input axis, truncates to
/// `new_in` and scales by `in / new_in`. `Average` replaces every input
/// slice by the mean slice scaled by `in / new_in`. Both keep the response
/// to inputs whose channels repeat the original block (copy) or are all
/// equal (average).
pub fn adapt_input_channels(w: &Tensor, new_in: usize, strategy: AdaptStrategy) -> Result<Tensor> {
    if w.rank() != 4 {
        return Err(Error::shape(
            "adapt_input_channels",
            format!("expected a rank-4 kernel, got shape {:?}", w.dims()),
        ));
    }
    let cin = w.dim(1)?;
    if new_in == 0 {
        return Err(Error::config("new input channel count must be >= 1"));
    }
    let scale = cin as f64 / new_in as f64;
    let out = match strategy {
        AdaptStrategy::CopyScaled => tile_in(w, new_in)?,
        AdaptStrategy::Average => tile_in(&w.mean_keepdim(1)?, new_in)?,
    };
    Ok((out * scale)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptedTensor {
    pub name: String,
    pub source: String,
    pub strategy: AdaptStrategy,
    pub from_in: usize,
    pub to_in: usize,
}

/// Where each target tensor came from. The four lists partition the
/// target's tensor names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Same name, same shape.
    pub copied: Vec<String>,
    pub channel_adapted: Vec<AdaptedTensor>,
    /// Branch tensors (`rgb.`, `ir.`, `aux.`) filled from the single-stream
    /// name.
    pub duplicated: Vec<String>,
    /// Left at fresh initialization.
    pub unmatched: Vec<String>,
}

impl TransferReport {
    pub fn total(&self) -> usize {
        self.copied.len() + self.channel_adapted.len() + self.duplicated.len() + self.unmatched.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "copied {}\nchannel_adapted {}\nduplicated {}\nunmatched {}\n",
            self.copied.len(),
            self.channel_adapted.len(),
            self.duplicated.len(),
            self.unmatched.len()
        );
        for a in &self.channel_adapted {
            s.push_str(&format!(
                "adapted {} <- {} ({} {} -> {})\n",
                a.name,
                a.source,
                a.strategy.name(),
                a.from_in,
                a.to_in
            ));
        }
        for n in &self.unmatched {
            s.push_str(&format!("unmatched {n}\n"));
        }
        s
    }
}

fn strip_branch(name: &str) -> Option<&str> {
    BRANCH_PREFIXES.iter().find_map(|p| name.strip_prefix(p))
}

/// Loads `ckpt` into `store` by name. Exact names are copied; branch names
/// fall back to their single-stream counterpart; kernels differing only in
/// input channels are adapted with `strategy`. Any other shape disagreement
/// is an error.
pub fn load_with_transfer(ckpt: &Checkpoint, store: &ParamStore, strategy: AdaptStrategy) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    for name in store.all_names() {
        let target = store.get(&name).expect("name from store").tensor().clone();
        let (source, via_branch) = match ckpt.tensors.get_key_value(&name) {
            Some((k, t)) => (Some((k.clone(), t)), false),
            None => match strip_branch(&name).and_then(|base| ckpt.tensors.get_key_value(base)) {
                Some((k, t)) => (Some((k.clone(), t)), true),
                None => (None, false),
            },
        };
        let Some((src_name, src)) = source else {
            report.unmatched.push(name);
            continue;
        };
        if src.dims() == target.dims() {
            store.assign(&name, src)?;
            if via_branch {
                report.duplicated.push(name);
            } else {
                report.copied.push(name);
            }
            continue;
        }
        let (sd, td) = (src.dims(), target.dims());
        let in_only = sd.len() == 4 && td.len() == 4 && sd[0] == td[0] && sd[2..] == td[2..];
        if !in_only {
            return Err(Error::Load(format!(
                "{name}: checkpoint tensor {src_name} has shape {sd:?}, model expects {td:?}"
            )));
        }
        let adapted = adapt_input_channels(src, td[1], strategy)?;
        store.assign(&name, &adapted)?;
        report.channel_adapted.push(AdaptedTensor {
            name,
            source: src_name,
            strategy,
            from_in: sd[1],
            to_in: td[1],
        });
    }
    Ok(report)
}

/// Builds a fresh `target` graph (seeded) and fills it from a
/// single-modality checkpoint: backbones are duplicated into both branch
/// namespaces, shared parts copied, junction layers left fresh.
pub fn duplicate_backbone(
    src: &Checkpoint,
    target: &ModelSpec,
    strategy: AdaptStrategy,
    seed: u64,
) -> Result<(Checkpoint, TransferReport)> {
    if !matches!(src.manifest.spec.topology, Topology::Single(_)) || src.manifest.mcf_primary.is_some() {
        return Err(Error::config(format!(
            "backbone duplication needs a single-modality source, got {}",
            src.manifest.fusion_name()
        )));
    }
    let dtype = src.tensors.values().next().map_or(DType::F32, |t| t.dtype());
    let model = Model::with_dtype(target, seed, dtype)?;
    let report = load_with_transfer(src, model.store(), strategy)?;
    Ok((Checkpoint::from_model(&model)?, report))
}
