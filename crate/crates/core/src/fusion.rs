//! Two-stream fusion topologies built from the single-modality detector
//! pieces.
//!
//! | mode          | RGB/IR separation                 | junctions                    |
//! |---------------|-----------------------------------|------------------------------|
//! | `early`       | none, channels concatenated       | input                        |
//! | `mid`         | two backbones (through P5)        | P3, P4, P5 (concat + 1×1)    |
//! | `mid_p3`      | two stems (through P3)            | P3 (concat + 1×1)            |
//! | `mid_to_late` | two backbones + two necks         | three neck outputs           |
//! | `late`        | two full stacks                   | head logits (mean)           |
//! | `score`       | two detectors                     | detection lists (merge)      |
//! | `share_weight`| one backbone applied to both      | P3, P4, P5 (paired 1×1)      |
//!
//! Every junction emits the single-modality channel count at its stage, so
//! the downstream neck and head are the unmodified single-stream graphs.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ModalityPolicy;
use crate::detector::{
    nms, Backbone, BackboneHigh, BackboneLow, Channels, DetectModel, Detection, Detector,
    FeaturePyramid, Head, HeadOutput, Modality, ModelInput, ModelOutput, ModelSpec, Neck,
    Topology,
};
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBn, Mode, PairMix, ParamStore, Sppf};

/// IoU above which an RGB and an IR detection of the same class are merged
/// under score fusion.
pub const DEFAULT_SCORE_MERGE_IOU: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Early,
    Mid,
    MidP3,
    MidToLate,
    Late,
    Score,
    ShareWeight,
}

impl FusionMode {
    pub const ALL: [FusionMode; 7] = [
        FusionMode::Early,
        FusionMode::Mid,
        FusionMode::MidP3,
        FusionMode::MidToLate,
        FusionMode::Late,
        FusionMode::Score,
        FusionMode::ShareWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Early => "early",
            FusionMode::Mid => "mid",
            FusionMode::MidP3 => "mid_p3",
            FusionMode::MidToLate => "mid_to_late",
            FusionMode::Late => "late",
            FusionMode::Score => "score",
            FusionMode::ShareWeight => "share_weight",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == key || m.name().replace('_', "") == key)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown fusion mode {s:?} (expected one of early, mid, mid_p3, mid_to_late, late, score, share_weight)"
                ))
            })
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JunctionStage {
    Input,
    P3,
    P4,
    P5,
    NeckP3,
    NeckP4,
    NeckP5,
    HeadOut,
    Detections,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    /// Channel concatenation; the following layer does the reduction.
    Concat,
    /// Concatenation followed by a learned 1×1 reduction.
    ConcatReduce,
    /// Per-channel pairing of two aligned streams followed by a 1×1 mix.
    PairedReduce,
    /// Element-wise mean.
    Mean,
    /// Detection-list merge.
    ScoreMerge,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionJunction {
    pub name: String,
    pub stage: JunctionStage,
    pub combiner: Combiner,
    /// Output channel count (equal to the single-stream count at the stage).
    pub channels: usize,
    pub params: usize,
}

/// Concatenation of two streams followed by a 1×1 reduction.
#[derive(Debug, Clone)]
struct ConcatReduce {
    conv: ConvBn,
}

impl ConcatReduce {
    fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: ConvBn::new(b, name, 2 * channels, channels, 1, 1)?,
        })
    }

    fn forward(&self, a: &Tensor, b: &Tensor, mode: Mode) -> Result<Tensor> {
        self.conv.forward(&Tensor::cat(&[a, b], 1)?, mode)
    }
}

#[derive(Debug, Clone)]
enum Net {
    Single(Modality, Detector),
    Early(Detector),
    Mid {
        rgb: (BackboneLow, BackboneHigh),
        ir: (BackboneLow, BackboneHigh),
        fuse: [ConcatReduce; 3],
        tail: Sppf,
        neck: Neck,
        head: Head,
    },
    MidP3 {
        rgb: BackboneLow,
        ir: BackboneLow,
        fuse: ConcatReduce,
        high: BackboneHigh,
        tail: Sppf,
        neck: Neck,
        head: Head,
    },
    MidToLate {
        rgb: (Backbone, Neck),
        ir: (Backbone, Neck),
        fuse: [ConcatReduce; 3],
        head: Head,
    },
    Late {
        rgb: Detector,
        ir: Detector,
    },
    Score {
        rgb: Detector,
        ir: Detector,
    },
    ShareWeight {
        low: BackboneLow,
        high: BackboneHigh,
        fuse: [PairMix; 3],
        tail: Sppf,
        neck: Neck,
        head: Head,
    },
}

/// A built detector graph for any topology, together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    net: Net,
    junctions: Vec<FusionJunction>,
    score_merge_iou: f64,
}

impl Model {
    /// Builds the graph for `spec` with deterministic initialization.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, seed, DType::F32)
    }

    pub fn with_dtype(spec: &ModelSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let ch = Channels::for_scale(spec.scale);
        let nc = spec.num_classes;
        let r = spec.reg_max;
        let ir_c = spec.ir_channels;
        let mut b = Builder::new(seed, dtype);
        let mut junctions = Vec::new();

        let net = match spec.topology {
            Topology::Single(m) => {
                Net::Single(m, Detector::new(&mut b, "", &ch, spec.channels_of(m), nc, r)?)
            }
            Topology::Fused(FusionMode::Early) => {
                junctions.push(junction(&b, "input", JunctionStage::Input, Combiner::Concat, 3 + ir_c));
                Net::Early(Detector::new(&mut b, "", &ch, 3 + ir_c, nc, r)?)
            }
            Topology::Fused(FusionMode::Mid) => {
                let rgb = (
                    BackboneLow::new(&mut b, "rgb.backbone", &ch, 3)?,
                    BackboneHigh::new(&mut b, "rgb.backbone", &ch)?,
                );
                let ir = (
                    BackboneLow::new(&mut b, "ir.backbone", &ch, ir_c)?,
                    BackboneHigh::new(&mut b, "ir.backbone", &ch)?,
                );
                let fuse = [
                    ConcatReduce::new(&mut b, "fuse.p3", ch.p3)?,
                    ConcatReduce::new(&mut b, "fuse.p4", ch.p4)?,
                    ConcatReduce::new(&mut b, "fuse.p5", ch.p5)?,
                ];
                for (name, stage, c) in [
                    ("fuse.p3", JunctionStage::P3, ch.p3),
                    ("fuse.p4", JunctionStage::P4, ch.p4),
                    ("fuse.p5", JunctionStage::P5, ch.p5),
                ] {
                    junctions.push(junction(&b, name, stage, Combiner::ConcatReduce, c));
                }
                let tail = Sppf::new(&mut b, "backbone.9", ch.p5, ch.p5, 5)?;
                let neck = Neck::new(&mut b, "neck", &ch)?;
                let head = Head::new(&mut b, "head", ch.neck_out(), nc, r, spec.strides)?;
                Net::Mid {
                    rgb,
                    ir,
                    fuse,
                    tail,
                    neck,
                    head,
                }
            }
            Topology::Fused(FusionMode::MidP3) => {
                let rgb = BackboneLow::new(&mut b, "rgb.backbone", &ch, 3)?;
                let ir = BackboneLow::new(&mut b, "ir.backbone", &ch, ir_c)?;
                let fuse = ConcatReduce::new(&mut b, "fuse.p3", ch.p3)?;
                junctions.push(junction(&b, "fuse.p3", JunctionStage::P3, Combiner::ConcatReduce, ch.p3));
                let high = BackboneHigh::new(&mut b, "backbone", &ch)?;
                let tail = Sppf::new(&mut b, "backbone.9", ch.p5, ch.p5, 5)?;
                let neck = Neck::new(&mut b, "neck", &ch)?;
                let head = Head::new(&mut b, "head", ch.neck_out(), nc, r, spec.strides)?;
                Net::MidP3 {
                    rgb,
                    ir,
                    fuse,
                    high,
                    tail,
                    neck,
                    head,
                }
            }
            Topology::Fused(FusionMode::MidToLate) => {
                let rgb = (
                    Backbone::new(&mut b, "rgb.backbone", &ch, 3)?,
                    Neck::new(&mut b, "rgb.neck", &ch)?,
                );
                let ir = (
                    Backbone::new(&mut b, "ir.backbone", &ch, ir_c)?,
                    Neck::new(&mut b, "ir.neck", &ch)?,
                );
                let [n3, n4, n5] = ch.neck_out();
                let fuse = [
                    ConcatReduce::new(&mut b, "fuse.n3", n3)?,
                    ConcatReduce::new(&mut b, "fuse.n4", n4)?,
                    ConcatReduce::new(&mut b, "fuse.n5", n5)?,
                ];
                for (name, stage, c) in [
                    ("fuse.n3", JunctionStage::NeckP3, n3),
                    ("fuse.n4", JunctionStage::NeckP4, n4),
                    ("fuse.n5", JunctionStage::NeckP5, n5),
                ] {
                    junctions.push(junction(&b, name, stage, Combiner::ConcatReduce, c));
                }
                let head = Head::new(&mut b, "head", ch.neck_out(), nc, r, spec.strides)?;
                Net::MidToLate { rgb, ir, fuse, head }
            }
            Topology::Fused(mode @ (FusionMode::Late | FusionMode::Score)) => {
                let rgb = Detector::new(&mut b, "rgb", &ch, 3, nc, r)?;
                let ir = Detector::new(&mut b, "ir", &ch, ir_c, nc, r)?;
                if mode == FusionMode::Late {
                    junctions.push(junction(&b, "head", JunctionStage::HeadOut, Combiner::Mean, nc + 4 * r));
                    Net::Late { rgb, ir }
                } else {
                    junctions.push(junction(&b, "detections", JunctionStage::Detections, Combiner::ScoreMerge, 0));
                    Net::Score { rgb, ir }
                }
            }
            Topology::Fused(FusionMode::ShareWeight) => {
                let low = BackboneLow::new(&mut b, "backbone", &ch, 3)?;
                let high = BackboneHigh::new(&mut b, "backbone", &ch)?;
                let fuse = [
                    PairMix::new(&mut b, "fuse.p3", ch.p3)?,
                    PairMix::new(&mut b, "fuse.p4", ch.p4)?,
                    PairMix::new(&mut b, "fuse.p5", ch.p5)?,
                ];
                for (name, stage, c) in [
                    ("fuse.p3", JunctionStage::P3, ch.p3),
                    ("fuse.p4", JunctionStage::P4, ch.p4),
                    ("fuse.p5", JunctionStage::P5, ch.p5),
                ] {
                    junctions.push(junction(&b, name, stage, Combiner::PairedReduce, c));
                }
                let tail = Sppf::new(&mut b, "backbone.9", ch.p5, ch.p5, 5)?;
                let neck = Neck::new(&mut b, "neck", &ch)?;
                let head = Head::new(&mut b, "head", ch.neck_out(), nc, r, spec.strides)?;
                Net::ShareWeight {
                    low,
                    high,
                    fuse,
                    tail,
                    neck,
                    head,
                }
            }
        };

        Ok(Self {
            spec: spec.clone(),
            store: b.finish(),
            net,
            junctions,
            score_merge_iou: DEFAULT_SCORE_MERGE_IOU,
        })
    }

    pub fn with_score_merge_iou(mut self, iou: f64) -> Self {
        self.score_merge_iou = iou;
        self
    }

    pub fn junctions(&self) -> &[FusionJunction] {
        &self.junctions
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Exact count of trainable and frozen scalars (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }
}

/// Records a junction. Call after its layers are built so the parameter
/// count under `name.` is final.
fn junction(b: &Builder, name: &str, stage: JunctionStage, combiner: Combiner, channels: usize) -> FusionJunction {
    let prefix = format!("{name}.");
    FusionJunction {
        name: name.to_string(),
        stage,
        combiner,
        channels,
        params: b.store().count_prefix(&prefix),
    }
}

fn ir_as_rgb(ir: &Tensor) -> Result<Tensor> {
    if ir.dim(1)? == 1 {
        Ok(Tensor::cat(&[ir, ir, ir], 1)?)
    } else {
        Ok(ir.clone())
    }
}

impl DetectModel for Model {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, input: &ModelInput, mode: Mode) -> Result<ModelOutput> {
        let single = |pyramid: FeaturePyramid, head: HeadOutput| ModelOutput {
            pyramid,
            heads: vec![head],
        };
        match &self.net {
            Net::Single(m, det) => {
                let (p, h) = det.forward(input.get(*m)?, mode)?;
                Ok(single(p, h))
            }
            Net::Early(det) => {
                let x = Tensor::cat(&[input.get(Modality::Rgb)?, input.get(Modality::Ir)?], 1)?;
                let (p, h) = det.forward(&x, mode)?;
                Ok(single(p, h))
            }
            Net::Mid {
                rgb,
                ir,
                fuse,
                tail,
                neck,
                head,
            } => {
                let (p2, r3) = rgb.0.forward(input.get(Modality::Rgb)?, mode)?;
                let (_, i3) = ir.0.forward(input.get(Modality::Ir)?, mode)?;
                let r4 = rgb.1.p4(&r3, mode)?;
                let i4 = ir.1.p4(&i3, mode)?;
                let r5 = rgb.1.p5(&r4, mode)?;
                let i5 = ir.1.p5(&i4, mode)?;
                let p3 = fuse[0].forward(&r3, &i3, mode)?;
                let p4 = fuse[1].forward(&r4, &i4, mode)?;
                let p5 = tail.forward(&fuse[2].forward(&r5, &i5, mode)?, mode)?;
                let n = neck.forward(&p3, &p4, &p5, mode)?;
                let h = head.forward(&n, mode)?;
                Ok(single(FeaturePyramid { p2, p3, p4, p5 }, h))
            }
            Net::MidP3 {
                rgb,
                ir,
                fuse,
                high,
                tail,
                neck,
                head,
            } => {
                let (p2, r3) = rgb.forward(input.get(Modality::Rgb)?, mode)?;
                let (_, i3) = ir.forward(input.get(Modality::Ir)?, mode)?;
                let p3 = fuse.forward(&r3, &i3, mode)?;
                let p4 = high.p4(&p3, mode)?;
                let p5 = tail.forward(&high.p5(&p4, mode)?, mode)?;
                let n = neck.forward(&p3, &p4, &p5, mode)?;
                let h = head.forward(&n, mode)?;
                Ok(single(FeaturePyramid { p2, p3, p4, p5 }, h))
            }
            Net::MidToLate { rgb, ir, fuse, head } => {
                let rp = rgb.0.forward(input.get(Modality::Rgb)?, mode)?;
                let ip = ir.0.forward(input.get(Modality::Ir)?, mode)?;
                let rn = rgb.1.forward(&rp.p3, &rp.p4, &rp.p5, mode)?;
                let inn = ir.1.forward(&ip.p3, &ip.p4, &ip.p5, mode)?;
                let n = [
                    fuse[0].forward(&rn[0], &inn[0], mode)?,
                    fuse[1].forward(&rn[1], &inn[1], mode)?,
                    fuse[2].forward(&rn[2], &inn[2], mode)?,
                ];
                let h = head.forward(&n, mode)?;
                Ok(single(rp, h))
            }
            Net::Late { rgb, ir } => {
                let (rp, rh) = rgb.forward(input.get(Modality::Rgb)?, mode)?;
                let (_, ih) = ir.forward(input.get(Modality::Ir)?, mode)?;
                Ok(single(rp, HeadOutput::average(&rh, &ih)?))
            }
            Net::Score { rgb, ir } => {
                let (rp, rh) = rgb.forward(input.get(Modality::Rgb)?, mode)?;
                let (_, ih) = ir.forward(input.get(Modality::Ir)?, mode)?;
                Ok(ModelOutput {
                    pyramid: rp,
                    heads: vec![rh, ih],
                })
            }
            Net::ShareWeight {
                low,
                high,
                fuse,
                tail,
                neck,
                head,
            } => {
                let ir_in = ir_as_rgb(input.get(Modality::Ir)?)?;
                let (p2, r3) = low.forward(input.get(Modality::Rgb)?, mode)?;
                let (_, i3) = low.forward(&ir_in, mode)?;
                let r4 = high.p4(&r3, mode)?;
                let i4 = high.p4(&i3, mode)?;
                let r5 = high.p5(&r4, mode)?;
                let i5 = high.p5(&i4, mode)?;
                let p3 = fuse[0].forward(&r3, &i3, mode)?;
                let p4 = fuse[1].forward(&r4, &i4, mode)?;
                let p5 = tail.forward(&fuse[2].forward(&r5, &i5, mode)?, mode)?;
                let n = neck.forward(&p3, &p4, &p5, mode)?;
                let h = head.forward(&n, mode)?;
                Ok(single(FeaturePyramid { p2, p3, p4, p5 }, h))
            }
        }
    }

    fn postprocess(&self, out: &ModelOutput, conf: f64, iou: f64) -> Result<Vec<Vec<Detection>>> {
        let decoded = out
            .heads
            .iter()
            .map(|h| crate::detector::decode(h, conf))
            .collect::<Result<Vec<_>>>()?;
        match decoded.as_slice() {
            [one] => Ok(one.iter().map(|d| nms(d.clone(), iou)).collect()),
            [rgb, ir] => Ok(rgb
                .iter()
                .zip(ir)
                .map(|(r, i)| merge_scores(r, i, self.score_merge_iou, iou))
                .collect()),
            _ => Err(Error::config("unexpected number of head outputs")),
        }
    }
}

/// Per-backbone features of the shared-weight graph, exposed for checking
/// that both branches see one parameter set.
impl Model {
    pub fn branch_features(&self, input: &ModelInput, mode: Mode) -> Result<[FeaturePyramid; 2]> {
        match &self.net {
            Net::ShareWeight { low, high, tail, .. } => {
                let run = |x: &Tensor| -> Result<FeaturePyramid> {
                    let (p2, p3) = low.forward(x, mode)?;
                    let p4 = high.p4(&p3, mode)?;
                    let p5 = tail.forward(&high.p5(&p4, mode)?, mode)?;
                    Ok(FeaturePyramid { p2, p3, p4, p5 })
                };
                Ok([
                    run(input.get(Modality::Rgb)?)?,
                    run(&ir_as_rgb(input.get(Modality::Ir)?)?)?,
                ])
            }
            _ => Err(Error::config("branch features are only defined for share_weight")),
        }
    }
}

/// Merges RGB and IR detection lists.
///
/// RGB detections are visited by descending score; each takes the unused
/// same-class IR detection with the highest IoU above `iou_merge` (earliest
/// in score order on ties). A merged pair keeps the larger score and the
/// score-weighted mean box. Unpaired detections pass through, and the pool
/// is then suppressed with `nms_iou`.
pub fn merge_scores(
    dets_rgb: &[Detection],
    dets_ir: &[Detection],
    iou_merge: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let mut rgb = dets_rgb.to_vec();
    let mut ir = dets_ir.to_vec();
    rgb.sort_by(|a, b| b.score.total_cmp(&a.score));
    ir.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; ir.len()];
    let mut pool = Vec::with_capacity(rgb.len() + ir.len());
    for r in &rgb {
        let mut best: Option<(usize, f64)> = None;
        for (j, d) in ir.iter().enumerate() {
            if used[j] || d.class_id != r.class_id {
                continue;
            }
            let iou = r.bbox.iou(&d.bbox);
            if iou > iou_merge && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                pool.push(merge_pair(r, &ir[j]));
            }
            None => pool.push(*r),
        }
    }
    pool.extend(ir.iter().zip(&used).filter(|(_, u)| !**u).map(|(d, _)| *d));
    nms(pool, nms_iou)
}

fn merge_pair(a: &Detection, b: &Detection) -> Detection {
    let (wa, wb) = (a.score, b.score);
    let s = wa + wb;
    let avg = |x: f64, y: f64| if s > 0.0 { (wa * x + wb * y) / s } else { (x + y) / 2.0 };
    Detection {
        class_id: a.class_id,
        score: wa.max(wb),
        bbox: crate::geometry::BoxXyxy::new(
            avg(a.bbox.x1, b.bbox.x1),
            avg(a.bbox.y1, b.bbox.y1),
            avg(a.bbox.x2, b.bbox.x2),
            avg(a.bbox.y2, b.bbox.y2),
        ),
    }
}

/// Rejects fused topologies when only one modality is loaded.
pub fn check_policy(spec: &ModelSpec, policy: ModalityPolicy) -> Result<()> {
    match (spec.topology, policy) {
        (Topology::Fused(mode), p) if p != ModalityPolicy::Both => Err(Error::config(format!(
            "fusion mode {mode} requires modality_policy = both, got {}",
            p.name()
        ))),
        (Topology::Single(m), ModalityPolicy::Rgb) if m != Modality::Rgb => {
            Err(Error::config("an IR model cannot run on an RGB-only dataset"))
        }
        (Topology::Single(m), ModalityPolicy::Ir) if m != Modality::Ir => {
            Err(Error::config("an RGB model cannot run on an IR-only dataset"))
        }
        _ => Ok(()),
    }
}
