use candle_core::Tensor;

use super::{check_input_size, FeaturePyramid, HeadLevel, HeadOutput, Scale, Stage};
use crate::error::{Error, Result};
use crate::nn::{join, make_divisible, ops, Builder, C3k2, Conv2d, ConvBn, Mode, Sppf};

/// Per-scale channel widths and block depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub stem: usize,
    pub l1: usize,
    pub p2: usize,
    pub l3: usize,
    pub p3: usize,
    pub p4: usize,
    pub p5: usize,
    pub depth: usize,
    /// Use nested C3k blocks everywhere (larger scales).
    pub c3k: bool,
}

impl Channels {
    pub fn for_scale(scale: Scale) -> Self {
        let ch = |base: usize| make_divisible(base.min(scale.max_channels()) as f64 * scale.width(), 8);
        Self {
            stem: ch(64),
            l1: ch(128),
            p2: ch(256),
            l3: ch(256),
            p3: ch(512),
            p4: ch(512),
            p5: ch(1024),
            depth: ((3.0 * scale.depth()).round() as usize).max(1),
            c3k: scale == Scale::M,
        }
    }

    /// Neck output widths at strides 8, 16, 32.
    pub fn neck_out(&self) -> [usize; 3] {
        [self.l3, self.p4, self.p5]
    }
}

/// Stem through P3 (layers 0..=4).
#[derive(Debug, Clone)]
pub struct BackboneLow {
    l0: ConvBn,
    l1: ConvBn,
    l2: C3k2,
    l3: ConvBn,
    l4: C3k2,
    prefix: String,
}

impl BackboneLow {
    pub fn new(b: &mut Builder, prefix: &str, ch: &Channels, in_channels: usize) -> Result<Self> {
        let p = |i: usize| join(prefix, &i.to_string());
        Ok(Self {
            l0: ConvBn::new(b, &p(0), in_channels, ch.stem, 3, 2)?,
            l1: ConvBn::new(b, &p(1), ch.stem, ch.l1, 3, 2)?,
            l2: C3k2::new(b, &p(2), ch.l1, ch.p2, ch.depth, ch.c3k, 0.25, true)?,
            l3: ConvBn::new(b, &p(3), ch.p2, ch.l3, 3, 2)?,
            l4: C3k2::new(b, &p(4), ch.l3, ch.p3, ch.depth, ch.c3k, 0.25, true)?,
            prefix: prefix.to_string(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.l0.in_channels()
    }

    /// Returns `(p2, p3)`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(
                join(&self.prefix, "0"),
                format!("expected {} input channels, got {c}", self.in_channels()),
            ));
        }
        check_input_size(h, w)?;
        let x = self.l1.forward(&self.l0.forward(x, mode)?, mode)?;
        let p2 = self.l2.forward(&x, mode)?;
        let p3 = self.l4.forward(&self.l3.forward(&p2, mode)?, mode)?;
        Ok((p2, p3))
    }
}

/// P3 through P5 (layers 5..=8), before the pooling tail.
#[derive(Debug, Clone)]
pub struct BackboneHigh {
    l5: ConvBn,
    l6: C3k2,
    l7: ConvBn,
    l8: C3k2,
}

impl BackboneHigh {
    pub fn new(b: &mut Builder, prefix: &str, ch: &Channels) -> Result<Self> {
        let p = |i: usize| join(prefix, &i.to_string());
        Ok(Self {
            l5: ConvBn::new(b, &p(5), ch.p3, ch.p4, 3, 2)?,
            l6: C3k2::new(b, &p(6), ch.p4, ch.p4, ch.depth, true, 0.5, true)?,
            l7: ConvBn::new(b, &p(7), ch.p4, ch.p5, 3, 2)?,
            l8: C3k2::new(b, &p(8), ch.p5, ch.p5, ch.depth, true, 0.5, true)?,
        })
    }

    pub fn p4(&self, p3: &Tensor, mode: Mode) -> Result<Tensor> {
        self.l6.forward(&self.l5.forward(p3, mode)?, mode)
    }

    pub fn p5(&self, p4: &Tensor, mode: Mode) -> Result<Tensor> {
        self.l8.forward(&self.l7.forward(p4, mode)?, mode)
    }
}

/// Complete backbone: low and high sections plus the SPPF tail (layer 9).
#[derive(Debug, Clone)]
pub struct Backbone {
    pub low: BackboneLow,
    pub high: BackboneHigh,
    pub tail: Sppf,
}

impl Backbone {
    pub fn new(b: &mut Builder, prefix: &str, ch: &Channels, in_channels: usize) -> Result<Self> {
        Ok(Self {
            low: BackboneLow::new(b, prefix, ch, in_channels)?,
            high: BackboneHigh::new(b, prefix, ch)?,
            tail: Sppf::new(b, &join(prefix, "9"), ch.p5, ch.p5, 5)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        self.forward_with(x, mode, &mut |_, t| Ok(t))
    }

    /// Forward pass where `inject` may replace the P3, P4 and P5 outputs
    /// before the next stage consumes them.
    pub fn forward_with(
        &self,
        x: &Tensor,
        mode: Mode,
        inject: &mut dyn FnMut(Stage, Tensor) -> Result<Tensor>,
    ) -> Result<FeaturePyramid> {
        let (p2, p3) = self.low.forward(x, mode)?;
        let p3 = inject(Stage::P3, p3)?;
        let p4 = inject(Stage::P4, self.high.p4(&p3, mode)?)?;
        let p5 = self.tail.forward(&self.high.p5(&p4, mode)?, mode)?;
        let p5 = inject(Stage::P5, p5)?;
        Ok(FeaturePyramid { p2, p3, p4, p5 })
    }
}

/// Top-down then bottom-up path aggregation over P3..P5.
#[derive(Debug, Clone)]
pub struct Neck {
    l13: C3k2,
    l16: C3k2,
    l17: ConvBn,
    l19: C3k2,
    l20: ConvBn,
    l22: C3k2,
}

impl Neck {
    pub fn new(b: &mut Builder, prefix: &str, ch: &Channels) -> Result<Self> {
        let p = |i: usize| join(prefix, &i.to_string());
        let [n3, n4, n5] = ch.neck_out();
        Ok(Self {
            l13: C3k2::new(b, &p(13), ch.p5 + ch.p4, n4, ch.depth, ch.c3k, 0.5, true)?,
            l16: C3k2::new(b, &p(16), n4 + ch.p3, n3, ch.depth, ch.c3k, 0.5, true)?,
            l17: ConvBn::new(b, &p(17), n3, n3, 3, 2)?,
            l19: C3k2::new(b, &p(19), n3 + n4, n4, ch.depth, ch.c3k, 0.5, true)?,
            l20: ConvBn::new(b, &p(20), n4, n4, 3, 2)?,
            l22: C3k2::new(b, &p(22), n4 + ch.p5, n5, ch.depth, true, 0.5, true)?,
        })
    }

    pub fn forward(&self, p3: &Tensor, p4: &Tensor, p5: &Tensor, mode: Mode) -> Result<[Tensor; 3]> {
        let up = ops::upsample2x;
        let h13 = self.l13.forward(&Tensor::cat(&[up(p5)?, p4.clone()], 1)?, mode)?;
        let n3 = self.l16.forward(&Tensor::cat(&[up(&h13)?, p3.clone()], 1)?, mode)?;
        let d = self.l17.forward(&n3, mode)?;
        let n4 = self.l19.forward(&Tensor::cat(&[d, h13], 1)?, mode)?;
        let d = self.l20.forward(&n4, mode)?;
        let n5 = self.l22.forward(&Tensor::cat(&[d, p5.clone()], 1)?, mode)?;
        Ok([n3, n4, n5])
    }
}

#[derive(Debug, Clone)]
struct Branch {
    c0: ConvBn,
    c1: ConvBn,
    out: Conv2d,
}

impl Branch {
    fn new(b: &mut Builder, prefix: &str, c_in: usize, hidden: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            c0: ConvBn::new(b, &join(prefix, "0"), c_in, hidden, 3, 1)?,
            c1: ConvBn::new(b, &join(prefix, "1"), hidden, hidden, 3, 1)?,
            out: Conv2d::new(b, &join(prefix, "2"), hidden, c_out, 1, 1, true)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.out.forward(&self.c1.forward(&self.c0.forward(x, mode)?, mode)?)
    }
}

/// Decoupled head: a box-distribution tower and a classification tower per
/// stride.
#[derive(Debug, Clone)]
pub struct Head {
    boxes: Vec<Branch>,
    cls: Vec<Branch>,
    strides: [usize; 3],
    reg_max: usize,
}

impl Head {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        in_ch: [usize; 3],
        num_classes: usize,
        reg_max: usize,
        strides: [usize; 3],
    ) -> Result<Self> {
        let c2 = 16.max(in_ch[0] / 4).max(4 * reg_max);
        let c3 = in_ch[0].max(num_classes.min(100));
        let mut boxes = Vec::new();
        let mut cls = Vec::new();
        for (i, &c) in in_ch.iter().enumerate() {
            boxes.push(Branch::new(b, &join(prefix, &format!("box.{i}")), c, c2, 4 * reg_max)?);
            cls.push(Branch::new(b, &join(prefix, &format!("cls.{i}")), c, c3, num_classes)?);
        }
        for (i, s) in strides.iter().enumerate() {
            boxes[i].out.fill_bias(1.0)?;
            let prior = (5.0 / num_classes as f64 / (640.0 / *s as f64).powi(2)).ln();
            cls[i].out.fill_bias(prior)?;
        }
        Ok(Self {
            boxes,
            cls,
            strides,
            reg_max,
        })
    }

    pub fn forward(&self, feats: &[Tensor; 3], mode: Mode) -> Result<HeadOutput> {
        let levels = feats
            .iter()
            .enumerate()
            .map(|(i, x)| {
                Ok(HeadLevel {
                    stride: self.strides[i],
                    cls: self.cls[i].forward(x, mode)?,
                    dist: self.boxes[i].forward(x, mode)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(HeadOutput {
            levels,
            reg_max: self.reg_max,
        })
    }
}

/// A complete single-stream detector.
#[derive(Debug, Clone)]
pub struct Detector {
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

impl Detector {
    /// Builds `{prefix}backbone`, `{prefix}neck` and `{prefix}head`.
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        ch: &Channels,
        in_channels: usize,
        num_classes: usize,
        reg_max: usize,
    ) -> Result<Self> {
        let backbone = Backbone::new(b, &join(prefix, "backbone"), ch, in_channels)?;
        let neck = Neck::new(b, &join(prefix, "neck"), ch)?;
        let head = Head::new(b, &join(prefix, "head"), ch.neck_out(), num_classes, reg_max, [8, 16, 32])?;
        Ok(Self { backbone, neck, head })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(FeaturePyramid, HeadOutput)> {
        self.forward_with(x, mode, &mut |_, t| Ok(t))
    }

    pub fn forward_with(
        &self,
        x: &Tensor,
        mode: Mode,
        inject: &mut dyn FnMut(Stage, Tensor) -> Result<Tensor>,
    ) -> Result<(FeaturePyramid, HeadOutput)> {
        let pyr = self.backbone.forward_with(x, mode, inject)?;
        let n = self.neck.forward(&pyr.p3, &pyr.p4, &pyr.p5, mode)?;
        let head = self.head.forward(&n, mode)?;
        Ok((pyr, head))
    }
}
