//! Optimizer presets, warmup schedule, the training loop and validation.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batch_input, letterbox, AugmentConfig, PairedSample};
use crate::detector::{DetectModel, DEFAULT_EVAL_CONF, DEFAULT_IOU};
use crate::error::{Error, Result};
use crate::geometry::BoxXyxy;
use crate::loss::{compute_loss, LossParts, LossWeights};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{Mode, ParamKind, ParamStore};
use crate::transfer::Checkpoint;

pub const NOMINAL_MOMENTUM: f64 = 0.937;
pub const WEIGHT_DECAY: f64 = 5e-4;
/// Final learning rate as a fraction of `lr0`.
pub const FINAL_LR_FRACTION: f64 = 0.01;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PresetName {
    #[serde(rename = "sgd-init")]
    SgdInit,
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "adam")]
    Adam,
}

impl PresetName {
    pub fn name(self) -> &'static str {
        match self {
            PresetName::SgdInit => "sgd-init",
            PresetName::Sgd => "sgd",
            PresetName::Adam => "adam",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sgd-init" => Ok(PresetName::SgdInit),
            "sgd" => Ok(PresetName::Sgd),
            "adam" => Ok(PresetName::Adam),
            _ => Err(Error::config(format!("unknown optimizer preset {s:?} (expected sgd-init, sgd or adam)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerPreset {
    pub name: PresetName,
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub warmup_epochs: f64,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerPreset {
    pub fn get(name: PresetName) -> Self {
        let (kind, lr0, we, wm, wb) = match name {
            PresetName::SgdInit => (OptimizerKind::Sgd, 0.01, 3.0, 0.8, 0.1),
            PresetName::Sgd => (OptimizerKind::Sgd, 0.01, 1.0, 0.1, 0.01),
            PresetName::Adam => (OptimizerKind::Adam, 0.001, 1.0, 0.1, 0.01),
        };
        Self {
            name,
            kind,
            lr0,
            warmup_epochs: we,
            warmup_momentum: wm,
            warmup_bias_lr: wb,
            momentum: NOMINAL_MOMENTUM,
            weight_decay: WEIGHT_DECAY,
        }
    }

    /// Warmup length in iterations, at least one.
    pub fn warmup_iters(&self, iters_per_epoch: usize) -> usize {
        ((self.warmup_epochs * iters_per_epoch as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValues {
    pub lr: f64,
    pub lr_bias: f64,
    pub momentum: f64,
}

/// Learning rates and momentum at `iteration` (0-based).
///
/// During warmup the weight lr rises linearly from 0, the bias lr moves from
/// `warmup_bias_lr`, and momentum from `warmup_momentum`, all reaching their
/// nominal values at `warmup_iters`. Afterwards both learning rates decay
/// linearly to `FINAL_LR_FRACTION * lr0` at iteration `total_iters - 1`.
pub fn warmup_schedule(iteration: usize, warmup_iters: usize, total_iters: usize, p: &OptimizerPreset) -> ScheduleValues {
    let warmup_iters = warmup_iters.max(1);
    if iteration < warmup_iters {
        let t = iteration as f64 / warmup_iters as f64;
        let lerp = |a: f64, b: f64| a * (1.0 - t) + b * t;
        return ScheduleValues {
            lr: p.lr0 * t,
            lr_bias: lerp(p.warmup_bias_lr, p.lr0),
            momentum: lerp(p.warmup_momentum, p.momentum),
        };
    }
    let last = total_iters.saturating_sub(1);
    let lr = if last <= warmup_iters {
        p.lr0
    } else {
        let f = (iteration.min(last) - warmup_iters) as f64 / (last - warmup_iters) as f64;
        p.lr0 * (1.0 - (1.0 - FINAL_LR_FRACTION) * f)
    };
    ScheduleValues {
        lr,
        lr_bias: lr,
        momentum: p.momentum,
    }
}

struct Slot {
    name: String,
    var: Var,
    kind: ParamKind,
    m: Option<Tensor>,
    v: Option<Tensor>,
}

/// SGD (Nesterov) or Adam over a fixed set of named parameters. Conv
/// weights get L2 weight decay; normalization weights and all biases do
/// not. Biases follow the bias learning rate.
pub struct Optimizer {
    preset: OptimizerPreset,
    slots: Vec<Slot>,
    step: usize,
}

impl Optimizer {
    /// Optimizes every trainable parameter in `store`.
    pub fn new(store: &ParamStore, preset: OptimizerPreset) -> Result<Self> {
        Self::with_params(store, &store.trainable_names(), preset)
    }

    pub fn with_params(store: &ParamStore, names: &[String], preset: OptimizerPreset) -> Result<Self> {
        let slots = names
            .iter()
            .map(|n| {
                let p = store
                    .get(n)
                    .ok_or_else(|| Error::config(format!("optimizer: unknown parameter {n}")))?;
                if p.kind.is_buffer() {
                    return Err(Error::config(format!("optimizer: {n} is a buffer, not a parameter")));
                }
                Ok(Slot {
                    name: n.clone(),
                    var: p.var.clone(),
                    kind: p.kind,
                    m: None,
                    v: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { preset, slots, step: 0 })
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn preset(&self) -> &OptimizerPreset {
        &self.preset
    }

    pub fn apply(&mut self, grads: &GradStore, sched: &ScheduleValues) -> Result<()> {
        self.step += 1;
        let p = self.preset;
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else { continue };
            // Detached so optimizer state does not keep autograd history alive.
            let g = g.detach();
            let w = &s.var.as_tensor().detach();
            let lr = match s.kind {
                ParamKind::Bias | ParamKind::NormBias => sched.lr_bias,
                _ => sched.lr,
            };
            let g = if s.kind == ParamKind::Weight && p.weight_decay > 0.0 {
                (g + (w * p.weight_decay)?)?
            } else {
                g.clone()
            };
            let next = match p.kind {
                OptimizerKind::Sgd => {
                    let buf = match &s.m {
                        Some(m) => ((m * sched.momentum)? + &g)?,
                        None => g.clone(),
                    };
                    let update = (&g + (&buf * sched.momentum)?)?;
                    s.m = Some(buf);
                    (w - (update * lr)?)?
                }
                OptimizerKind::Adam => {
                    let b1 = sched.momentum;
                    let m = match &s.m {
                        Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                        None => (&g * (1.0 - b1))?,
                    };
                    let g2 = g.sqr()?;
                    let v = match &s.v {
                        Some(v) => ((v * ADAM_BETA2)? + (&g2 * (1.0 - ADAM_BETA2))?)?,
                        None => (&g2 * (1.0 - ADAM_BETA2))?,
                    };
                    let t = self.step as i32;
                    let mhat = (&m / (1.0 - b1.powi(t)))?;
                    let vhat = (&v / (1.0 - ADAM_BETA2.powi(t)))?;
                    let update = (mhat / (vhat.sqrt()? + ADAM_EPS)?)?;
                    s.m = Some(m);
                    s.v = Some(v);
                    (w - (update * lr)?)?
                }
            };
            s.var.set(&next)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub img_size: u32,
    pub seed: u64,
    pub preset: PresetName,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    /// Single-threaded execution and no wall-clock fields in the log.
    pub deterministic: bool,
    /// Stop after this many optimizer steps.
    pub max_iterations: Option<usize>,
    /// Validate every this many epochs (and after the last).
    pub val_every: usize,
    pub conf: f64,
    pub iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            img_size: 640,
            seed: 0,
            preset: PresetName::SgdInit,
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            deterministic: false,
            max_iterations: None,
            val_every: 1,
            conf: DEFAULT_EVAL_CONF,
            iou: DEFAULT_IOU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.img_size == 0 || self.img_size % 32 != 0 {
            return Err(Error::config(format!("img_size {} is not divisible by 32", self.img_size)));
        }
        if self.val_every == 0 {
            return Err(Error::config("val_every must be >= 1"));
        }
        if !(self.conf > 0.0 && self.conf < 1.0) || !(self.iou > 0.0 && self.iou < 1.0) {
            return Err(Error::config("conf and iou thresholds must lie in (0, 1)"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Start {
        time_unix: u64,
    },
    Iter {
        epoch: usize,
        iter: usize,
        lr: f64,
        lr_bias: f64,
        momentum: f64,
        l_dfl: f64,
        l_cls: f64,
        l_loc: f64,
        l_all: f64,
    },
    Epoch {
        epoch: usize,
        map50: Option<f64>,
        map: Option<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub iterations: usize,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_map50: Option<f64>,
    pub last_report: Option<MetricsReport>,
}

impl TrainOutcome {
    /// Total loss of every iteration, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Iter { l_all, .. } => Some(*l_all),
                _ => None,
            })
            .collect()
    }
}

/// Letterboxes every sample to `img_size`.
pub fn prepare(samples: &[PairedSample], img_size: u32) -> Result<Vec<PairedSample>> {
    samples.iter().map(|s| Ok(letterbox(s, img_size)?.0)).collect()
}

fn pixel_targets(batch: &[&PairedSample]) -> Vec<Vec<(usize, BoxXyxy)>> {
    batch.iter().map(|s| s.pixel_boxes()).collect()
}

fn check_finite(parts: &LossParts, iteration: usize) -> Result<()> {
    for (name, v) in [("dfl", parts.dfl), ("cls", parts.cls), ("loc", parts.loc), ("total", parts.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                iteration,
            });
        }
    }
    Ok(())
}

/// Forward pass in training mode and the summed loss over every head.
pub fn batch_loss(
    model: &dyn DetectModel,
    batch: &[&PairedSample],
    weights: &LossWeights,
    dtype: DType,
) -> Result<(Tensor, LossParts)> {
    let input = batch_input(batch, dtype)?;
    let out = model.forward(&input, Mode::Train)?;
    let targets = pixel_targets(batch);
    let mut total: Option<Tensor> = None;
    let mut parts = LossParts::default();
    for head in &out.heads {
        let l = compute_loss(head, &targets, weights)?;
        parts.dfl += l.parts.dfl;
        parts.cls += l.parts.cls;
        parts.loc += l.parts.loc;
        parts.total += l.parts.total;
        total = Some(match total {
            Some(t) => (t + l.total)?,
            None => l.total,
        });
    }
    let total = total.ok_or_else(|| Error::config("model produced no head output"))?;
    Ok((total, parts))
}

/// One optimizer step on a prepared batch. Returns the loss decomposition
/// measured before the update.
pub fn train_step(
    model: &dyn DetectModel,
    optimizer: &mut Optimizer,
    batch: &[&PairedSample],
    weights: &LossWeights,
    sched: &ScheduleValues,
    iteration: usize,
) -> Result<LossParts> {
    let (total, parts) = batch_loss(model, batch, weights, model_dtype(model))?;
    check_finite(&parts, iteration)?;
    let grads = total.backward()?;
    optimizer.apply(&grads, sched)?;
    Ok(parts)
}

pub fn model_dtype(model: &dyn DetectModel) -> DType {
    model.store().iter().next().map_or(DType::F32, |(_, p)| p.tensor().dtype())
}

fn append_log(file: &mut Option<std::fs::File>, path: &Path, rec: &LogRecord) -> Result<()> {
    if let Some(f) = file {
        let line = serde_json::to_string(rec)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains `model` in place. With `out_dir`, writes `train_log.jsonl`,
/// `last.safetensors` and `best.safetensors` there. The best checkpoint is
/// the one with the highest validation mAP50 (the last one without a
/// validation set).
pub fn train(
    model: &dyn DetectModel,
    train_set: &[PairedSample],
    val_set: Option<&[PairedSample]>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| train_inner(model, train_set, val_set, config, out_dir))
    } else {
        train_inner(model, train_set, val_set, config, out_dir)
    }
}

fn train_inner(
    model: &dyn DetectModel,
    train_set: &[PairedSample],
    val_set: Option<&[PairedSample]>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let prepared = prepare(train_set, config.img_size)?;
    let val_prepared = match val_set {
        Some(v) => Some(prepare(v, config.img_size)?),
        None => None,
    };
    let preset = OptimizerPreset::get(config.preset);
    let mut optimizer = Optimizer::new(model.store(), preset)?;

    let iters_per_epoch = prepared.len().div_ceil(config.batch_size);
    let planned = config.epochs * iters_per_epoch;
    let total_iters = config.max_iterations.map_or(planned, |m| m.min(planned));
    let warmup = preset.warmup_iters(iters_per_epoch);

    let log_path: PathBuf = out_dir.map(|d| d.join("train_log.jsonl")).unwrap_or_default();
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?)
        }
        None => None,
    };
    let mut log = Vec::new();
    if !config.deterministic {
        let time_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let rec = LogRecord::Start { time_unix };
        append_log(&mut log_file, &log_path, &rec)?;
        log.push(rec);
    }

    let save = |ck: &Checkpoint, name: &str| -> Result<()> {
        if let Some(d) = out_dir {
            ck.save(&d.join(name))?;
        }
        Ok(())
    };

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last_report = None;
    let mut iteration = 0usize;
    'epochs: for epoch in 0..config.epochs {
        if iteration >= total_iters {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let aug_seeds: Vec<u64> = (0..prepared.len()).map(|_| rng.random()).collect();

        for chunk in order.chunks(config.batch_size) {
            if iteration >= total_iters {
                break 'epochs;
            }
            let batch: Vec<PairedSample> = chunk
                .iter()
                .map(|&i| augment(&prepared[i], &config.augment, aug_seeds[i]))
                .collect();
            let refs: Vec<&PairedSample> = batch.iter().collect();
            let sched = warmup_schedule(iteration, warmup, total_iters, &preset);
            let parts = train_step(model, &mut optimizer, &refs, &config.loss, &sched, iteration)?;
            let rec = LogRecord::Iter {
                epoch,
                iter: iteration,
                lr: sched.lr,
                lr_bias: sched.lr_bias,
                momentum: sched.momentum,
                l_dfl: parts.dfl,
                l_cls: parts.cls,
                l_loc: parts.loc,
                l_all: parts.total,
            };
            append_log(&mut log_file, &log_path, &rec)?;
            log.push(rec);
            iteration += 1;
        }

        let done = epoch + 1 == config.epochs || iteration >= total_iters;
        if let Some(vs) = &val_prepared {
            if (epoch + 1) % config.val_every == 0 || done {
                let report = validate_prepared(model, vs, config.batch_size, config.conf, config.iou)?;
                let rec = LogRecord::Epoch {
                    epoch,
                    map50: report.map50,
                    map: report.map,
                };
                append_log(&mut log_file, &log_path, &rec)?;
                log.push(rec);
                let score = report.map50.unwrap_or(0.0);
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    let ck = Checkpoint::from_store(model.store(), model.manifest())?;
                    save(&ck, "best.safetensors")?;
                    best = Some((score, ck));
                }
                last_report = Some(report);
            }
        }
    }

    let last = Checkpoint::from_store(model.store(), model.manifest())?;
    save(&last, "last.safetensors")?;
    let (best_map50, best) = match best {
        Some((s, ck)) => (Some(s), ck),
        None => {
            save(&last, "best.safetensors")?;
            (None, last.clone())
        }
    };
    Ok(TrainOutcome {
        log,
        iterations: iteration,
        last,
        best,
        best_map50,
        last_report,
    })
}

/// Runs inference over letterboxed samples; one detection list per sample.
pub fn predict_prepared(
    model: &dyn DetectModel,
    samples: &[PairedSample],
    batch_size: usize,
    conf: f64,
    iou: f64,
) -> Result<Vec<Vec<crate::detector::Detection>>> {
    let dtype = model_dtype(model);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let input = batch_input(&refs, dtype)?;
        out.extend(model.predict(&input, conf, iou)?);
    }
    Ok(out)
}

fn validate_prepared(
    model: &dyn DetectModel,
    samples: &[PairedSample],
    batch_size: usize,
    conf: f64,
    iou: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let preds = predict_prepared(model, samples, batch_size, conf, iou)?;
    let refs: Vec<&PairedSample> = samples.iter().collect();
    let gts = pixel_targets(&refs);
    Ok(evaluate(&preds, &gts, model.spec().num_classes))
}

/// Letterboxes, predicts and scores `samples`.
pub fn validate(
    model: &dyn DetectModel,
    samples: &[PairedSample],
    img_size: u32,
    batch_size: usize,
    conf: f64,
    iou: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    validate_prepared(model, &prepare(samples, img_size)?, batch_size, conf, iou)
}
