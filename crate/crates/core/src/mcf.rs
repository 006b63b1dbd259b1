//! Controllable fine-tuning: a frozen single-modality detector receives the
//! other modality through a trainable backbone whose P3, P4 and P5 features
//! are added to the frozen ones via zero-initialized 1×1 convolutions.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{ModalityPolicy, PairedSample};
use crate::detector::{
    Backbone, Channels, DetectModel, Detector, Modality, ModelInput, ModelOutput, ModelSpec, Stage,
};
use crate::error::{Error, Result};
use crate::loss::{LossParts, LossWeights};
use crate::nn::{Builder, Conv2d, Mode, ParamStore};
use crate::train::{train_step, Optimizer, ScheduleValues};
use crate::transfer::{AdaptStrategy, AdaptedTensor, Checkpoint, CheckpointManifest};

pub const AUX_PREFIX: &str = "aux.";
pub const ZERO_PREFIX: &str = "zero.";

/// How the auxiliary backbone starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxInit {
    /// Copy of the base backbone, input channels adapted if needed.
    FromBase(AdaptStrategy),
    /// Fresh seeded initialization.
    Random,
}

impl Default for AuxInit {
    fn default() -> Self {
        AuxInit::FromBase(AdaptStrategy::CopyScaled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub frozen_names: Vec<String>,
    pub trainable_names: Vec<String>,
    pub frozen_params: usize,
    pub trainable_params: usize,
}

#[derive(Debug, Clone)]
pub struct McfModel {
    spec: ModelSpec,
    primary: Modality,
    store: ParamStore,
    base: Detector,
    aux: Backbone,
    zero: [Conv2d; 3],
    adapted: Vec<AdaptedTensor>,
}

impl McfModel {
    pub fn primary(&self) -> Modality {
        self.primary
    }

    /// Auxiliary backbone tensors that needed input-channel adaptation.
    pub fn adapted(&self) -> &[AdaptedTensor] {
        &self.adapted
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn freeze_report(&self) -> FreezeReport {
        let frozen_names = self.store.frozen_names();
        let trainable_names = self.store.trainable_names();
        let count = |names: &[String]| names.iter().map(|n| self.store.get(n).map_or(0, |p| p.numel())).sum();
        FreezeReport {
            frozen_params: count(&frozen_names),
            trainable_params: count(&trainable_names),
            frozen_names,
            trainable_names,
        }
    }

    /// Output of the frozen detector alone on the primary modality.
    pub fn base_forward(&self, input: &ModelInput) -> Result<ModelOutput> {
        let (pyramid, head) = self.base.forward(input.get(self.primary)?, Mode::Eval)?;
        Ok(ModelOutput {
            pyramid,
            heads: vec![head],
        })
    }
}

/// Grafts an auxiliary branch onto a frozen single-modality detector loaded
/// from `base`. `spec` supplies scale, classes, `reg_max` and the infrared
/// channel count; its topology is ignored.
pub fn build_mcf_model(base: &Checkpoint, spec: &ModelSpec, primary: Modality, aux_init: AuxInit, seed: u64) -> Result<McfModel> {
    let spec = spec.single(primary);
    spec.validate()?;
    if base.manifest.mcf_primary.is_some() {
        return Err(Error::Load("base checkpoint is already a fine-tuning graph".into()));
    }
    let dtype = base.tensors.values().next().map_or(DType::F32, |t| t.dtype());
    let ch = Channels::for_scale(spec.scale);
    let mut b = Builder::new(seed, dtype);
    let base_net = Detector::new(&mut b, "", &ch, spec.channels_of(primary), spec.num_classes, spec.reg_max)?;
    let aux_prefix = format!("{AUX_PREFIX}backbone");
    let aux = Backbone::new(&mut b, &aux_prefix, &ch, spec.channels_of(primary.other()))?;
    let zero = [
        Conv2d::zeros(&mut b, "zero.p3", ch.p3, ch.p3)?,
        Conv2d::zeros(&mut b, "zero.p4", ch.p4, ch.p4)?,
        Conv2d::zeros(&mut b, "zero.p5", ch.p5, ch.p5)?,
    ];
    let mut store = b.finish();

    let base_names: Vec<String> = store
        .all_names()
        .into_iter()
        .filter(|n| !n.starts_with(AUX_PREFIX) && !n.starts_with(ZERO_PREFIX))
        .collect();
    for name in &base_names {
        let t = base
            .tensors
            .get(name)
            .ok_or_else(|| Error::Load(format!("base checkpoint is missing tensor {name}")))?;
        store.assign(name, t)?;
    }
    if let Some(extra) = base.tensors.keys().find(|n| !base_names.contains(n)) {
        return Err(Error::Load(format!("base checkpoint tensor {extra} has no counterpart in the detector")));
    }

    let mut adapted = Vec::new();
    if let AuxInit::FromBase(strategy) = aux_init {
        let aux_names: Vec<String> = store.all_names().into_iter().filter(|n| n.starts_with(AUX_PREFIX)).collect();
        for name in aux_names {
            let src_name = &name[AUX_PREFIX.len()..];
            let src = &base.tensors[src_name];
            let target = store.get(&name).expect("aux name").tensor().dims().to_vec();
            if src.dims() == target.as_slice() {
                store.assign(&name, src)?;
            } else {
                let w = crate::transfer::adapt_input_channels(src, target[1], strategy)?;
                store.assign(&name, &w)?;
                adapted.push(AdaptedTensor {
                    name: name.clone(),
                    source: src_name.to_string(),
                    strategy,
                    from_in: src.dims()[1],
                    to_in: target[1],
                });
            }
        }
    }

    for name in &base_names {
        store.set_trainable(name, false)?;
    }
    Ok(McfModel {
        spec,
        primary,
        store,
        base: base_net,
        aux,
        zero,
        adapted,
    })
}

/// Rebuilds a fine-tuning graph saved with [`McfModel`]'s manifest.
pub fn load_mcf_checkpoint(ck: &Checkpoint) -> Result<McfModel> {
    let primary = ck
        .manifest
        .mcf_primary
        .ok_or_else(|| Error::Load("checkpoint is not a fine-tuning graph".into()))?;
    let base_only = Checkpoint {
        tensors: ck
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(AUX_PREFIX) && !n.starts_with(ZERO_PREFIX))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect(),
        manifest: CheckpointManifest::new(&ck.manifest.spec),
    };
    let model = build_mcf_model(&base_only, &ck.manifest.spec, primary, AuxInit::Random, 0)?;
    ck.apply_exact(&model.store)?;
    Ok(model)
}

impl DetectModel for McfModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    /// The frozen detector always runs in evaluation mode, so its
    /// normalization statistics never move; `mode` applies to the auxiliary
    /// branch only.
    fn forward(&self, input: &ModelInput, mode: Mode) -> Result<ModelOutput> {
        let aux = self.aux.forward(input.get(self.primary.other())?, mode)?;
        let z3 = self.zero[0].forward(&aux.p3)?;
        let z4 = self.zero[1].forward(&aux.p4)?;
        let z5 = self.zero[2].forward(&aux.p5)?;
        let mut inject = |stage: Stage, t: Tensor| -> Result<Tensor> {
            Ok(match stage {
                Stage::P3 => (t + &z3)?,
                Stage::P4 => (t + &z4)?,
                Stage::P5 => (t + &z5)?,
                Stage::P2 => t,
            })
        };
        let (pyramid, head) = self.base.forward_with(input.get(self.primary)?, Mode::Eval, &mut inject)?;
        Ok(ModelOutput {
            pyramid,
            heads: vec![head],
        })
    }

    fn modality_policy(&self) -> ModalityPolicy {
        ModalityPolicy::Both
    }

    fn manifest(&self) -> CheckpointManifest {
        let mut m = CheckpointManifest::new(&self.spec);
        m.mcf_primary = Some(self.primary);
        m.frozen = self.store.frozen_names();
        m
    }
}

/// One fine-tuning step. Fails if the optimizer holds any frozen parameter.
pub fn finetune_step(
    mcf: &McfModel,
    optimizer: &mut Optimizer,
    batch: &[&PairedSample],
    weights: &LossWeights,
    sched: &ScheduleValues,
    iteration: usize,
) -> Result<LossParts> {
    if let Some(frozen) = optimizer
        .param_names()
        .find(|n| mcf.store.get(n).is_none_or(|p| !p.trainable))
    {
        return Err(Error::config(format!("optimizer is configured over frozen parameter {frozen}")));
    }
    train_step(mcf, optimizer, batch, weights, sched, iteration)
}

