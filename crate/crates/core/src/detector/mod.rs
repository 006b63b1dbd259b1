//! Single-modality anchor-free detector: backbone, PAN neck, decoupled head,
//! distribution decoding and non-maximum suppression.

mod decode;
mod features;
mod graph;

pub use decode::{decode, nms, Detection, DEFAULT_EVAL_CONF, DEFAULT_IOU, DEFAULT_PREDICT_CONF};
pub use features::{stage_image, Stage};
pub use graph::{Backbone, BackboneHigh, BackboneLow, Channels, Detector, Head, Neck};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::ModalityPolicy;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::nn::{Mode, ParamStore};
use crate::transfer::CheckpointManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    N,
    S,
    M,
}

impl Scale {
    pub fn depth(self) -> f64 {
        match self {
            Scale::N | Scale::S => 1.0 / 3.0,
            Scale::M => 2.0 / 3.0,
        }
    }

    pub fn width(self) -> f64 {
        match self {
            Scale::N => 0.25,
            Scale::S => 0.5,
            Scale::M => 0.75,
        }
    }

    pub fn max_channels(self) -> usize {
        match self {
            Scale::N | Scale::S => 1024,
            Scale::M => 512,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::N => "n",
            Scale::S => "s",
            Scale::M => "m",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Scale::N),
            "s" => Ok(Scale::S),
            "m" => Ok(Scale::M),
            other => Err(Error::config(format!("unsupported scale {other:?} (expected n, s or m)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Rgb => Modality::Ir,
            Modality::Ir => Modality::Rgb,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "ir" => Ok(Modality::Ir),
            other => Err(Error::config(format!("unknown modality {other:?} (expected rgb or ir)"))),
        }
    }
}

/// How the input modalities are wired into the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Single(Modality),
    Fused(FusionMode),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub scale: Scale,
    pub num_classes: usize,
    pub reg_max: usize,
    pub strides: [usize; 3],
    /// Channel count of the infrared stream (1 or 3).
    pub ir_channels: usize,
    pub topology: Topology,
}

impl ModelSpec {
    pub fn new(scale: Scale, num_classes: usize, topology: Topology) -> Self {
        Self {
            scale,
            num_classes,
            reg_max: 16,
            strides: [8, 16, 32],
            ir_channels: 3,
            topology,
        }
    }

    pub fn with_ir_channels(mut self, c: usize) -> Self {
        self.ir_channels = c;
        self
    }

    pub fn with_reg_max(mut self, r: usize) -> Self {
        self.reg_max = r;
        self
    }

    pub fn single(&self, modality: Modality) -> Self {
        Self {
            topology: Topology::Single(modality),
            ..self.clone()
        }
    }

    pub fn channels_of(&self, modality: Modality) -> usize {
        match modality {
            Modality::Rgb => 3,
            Modality::Ir => self.ir_channels,
        }
    }

    /// Channel count consumed by the first convolution of a single-stream
    /// graph (for fused graphs with two stems, the RGB stem).
    pub fn in_channels(&self) -> usize {
        match self.topology {
            Topology::Single(m) => self.channels_of(m),
            Topology::Fused(FusionMode::Early) => 3 + self.ir_channels,
            Topology::Fused(_) => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reg_max < 2 {
            return Err(Error::config(format!("reg_max must be >= 2, got {}", self.reg_max)));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.strides != [8, 16, 32] {
            return Err(Error::config(format!(
                "the graph has fixed strides [8, 16, 32], got {:?}",
                self.strides
            )));
        }
        if !matches!(self.ir_channels, 1 | 3) {
            return Err(Error::config(format!(
                "ir_channels must be 1 or 3, got {}",
                self.ir_channels
            )));
        }
        if !matches!(self.in_channels(), 1 | 3 | 4 | 6) {
            return Err(Error::config(format!("unsupported in_channels {}", self.in_channels())));
        }
        Ok(())
    }
}

/// Batched inputs, NCHW, values in [0, 1].
#[derive(Debug, Clone, Default)]
pub struct ModelInput {
    pub rgb: Option<Tensor>,
    pub ir: Option<Tensor>,
}

impl ModelInput {
    pub fn new(rgb: Option<Tensor>, ir: Option<Tensor>) -> Self {
        Self { rgb, ir }
    }

    pub fn get(&self, modality: Modality) -> Result<&Tensor> {
        match modality {
            Modality::Rgb => self.rgb.as_ref(),
            Modality::Ir => self.ir.as_ref(),
        }
        .ok_or_else(|| Error::config(format!("model requires the {} modality", modality.name())))
    }

    pub fn batch_size(&self) -> Result<usize> {
        let t = self
            .rgb
            .as_ref()
            .or(self.ir.as_ref())
            .ok_or_else(|| Error::config("empty model input"))?;
        Ok(t.dim(0)?)
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let t = self
            .rgb
            .as_ref()
            .or(self.ir.as_ref())
            .ok_or_else(|| Error::config("empty model input"))?;
        let (_, _, h, w) = t.dims4()?;
        Ok((h, w))
    }
}

/// Backbone stage outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub p2: Tensor,
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

impl FeaturePyramid {
    pub fn stage(&self, stage: Stage) -> &Tensor {
        match stage {
            Stage::P2 => &self.p2,
            Stage::P3 => &self.p3,
            Stage::P4 => &self.p4,
            Stage::P5 => &self.p5,
        }
    }
}

/// Raw head outputs at one stride.
#[derive(Debug, Clone)]
pub struct HeadLevel {
    pub stride: usize,
    /// `[B, num_classes, H, W]`
    pub cls: Tensor,
    /// `[B, 4 * reg_max, H, W]`, sides ordered left, top, right, bottom.
    pub dist: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub levels: Vec<HeadLevel>,
    pub reg_max: usize,
}

/// Anchor point in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPoint {
    pub x: f64,
    pub y: f64,
    pub stride: usize,
}

impl HeadOutput {
    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.levels[0].cls.dim(1)?)
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.levels[0].cls.dim(0)?)
    }

    /// Grid side lengths per level, `(H, W)`.
    pub fn grids(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|l| {
                let (_, _, h, w) = l.cls.dims4()?;
                Ok((h, w))
            })
            .collect()
    }

    /// Anchor points in the same order as [`HeadOutput::flatten`].
    pub fn anchors(&self) -> Result<Vec<AnchorPoint>> {
        let mut out = Vec::new();
        for l in &self.levels {
            let (_, _, h, w) = l.cls.dims4()?;
            let s = l.stride as f64;
            for y in 0..h {
                for x in 0..w {
                    out.push(AnchorPoint {
                        x: (x as f64 + 0.5) * s,
                        y: (y as f64 + 0.5) * s,
                        stride: l.stride,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Concatenates all levels: classification logits `[B, A, C]` and box
    /// distribution logits `[B, A, 4, reg_max]`.
    pub fn flatten(&self) -> Result<(Tensor, Tensor)> {
        let mut cls = Vec::with_capacity(self.levels.len());
        let mut dist = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            let (b, c, h, w) = l.cls.dims4()?;
            cls.push(l.cls.reshape((b, c, h * w))?);
            dist.push(l.dist.reshape((b, 4, self.reg_max, h * w))?);
        }
        let cls = Tensor::cat(&cls, 2)?.transpose(1, 2)?.contiguous()?;
        let dist = Tensor::cat(&dist, 3)?.permute((0, 3, 1, 2))?.contiguous()?;
        Ok((cls, dist))
    }

    /// Element-wise mean of two head outputs with identical shapes.
    pub fn average(a: &HeadOutput, b: &HeadOutput) -> Result<HeadOutput> {
        let levels = a
            .levels
            .iter()
            .zip(&b.levels)
            .map(|(x, y)| {
                Ok(HeadLevel {
                    stride: x.stride,
                    cls: ((&x.cls + &y.cls)? * 0.5)?,
                    dist: ((&x.dist + &y.dist)? * 0.5)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(HeadOutput {
            levels,
            reg_max: a.reg_max,
        })
    }
}

/// Result of a forward pass. Score fusion yields two heads (RGB, IR) that
/// are decoded independently; every other topology yields one.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub heads: Vec<HeadOutput>,
}

/// Behaviour shared by every trainable detector graph.
pub trait DetectModel: Send + Sync {
    fn spec(&self) -> &ModelSpec;

    fn store(&self) -> &ParamStore;

    fn forward(&self, input: &ModelInput, mode: Mode) -> Result<ModelOutput>;

    /// Which modalities a batch must carry.
    fn modality_policy(&self) -> ModalityPolicy {
        match self.spec().topology {
            Topology::Single(Modality::Rgb) => ModalityPolicy::Rgb,
            Topology::Single(Modality::Ir) => ModalityPolicy::Ir,
            Topology::Fused(_) => ModalityPolicy::Both,
        }
    }

    /// Checkpoint manifest describing this graph and its frozen parameters.
    fn manifest(&self) -> CheckpointManifest {
        let mut m = CheckpointManifest::new(self.spec());
        m.frozen = self.store().frozen_names();
        m
    }

    /// Decode, suppress and (for score fusion) merge. One list per image.
    fn postprocess(&self, out: &ModelOutput, conf: f64, iou: f64) -> Result<Vec<Vec<Detection>>> {
        let dets = decode(&out.heads[0], conf)?;
        Ok(dets.into_iter().map(|d| nms(d, iou)).collect())
    }

    fn predict(&self, input: &ModelInput, conf: f64, iou: f64) -> Result<Vec<Vec<Detection>>> {
        let out = self.forward(input, Mode::Eval)?;
        self.postprocess(&out, conf, iou)
    }
}

/// Checks that a spatial size is usable by the fixed-stride graph.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(
            "input",
            format!("spatial size {h}x{w} is not divisible by the maximum stride 32"),
        ));
    }
    Ok(())
}
