use candle_core::{Tensor, Var, D};

use super::{join, ops, Builder, Mode, ParamKind};
use crate::error::Result;

const BN_EPS: f64 = 1e-3;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.constant(join(prefix, "weight"), &[channels], 1.0, ParamKind::NormWeight)?,
            bias: b.constant(join(prefix, "bias"), &[channels], 0.0, ParamKind::NormBias)?,
            running_mean: b.constant(
                join(prefix, "running_mean"),
                &[channels],
                0.0,
                ParamKind::RunningMean,
            )?,
            running_var: b.constant(
                join(prefix, "running_var"),
                &[channels],
                1.0,
                ParamKind::RunningVar,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let w = self.weight.as_tensor().reshape((1, c, 1, 1))?;
        let bias = self.bias.as_tensor().reshape((1, c, 1, 1))?;
        match mode {
            Mode::Train => {
                let (n, _, h, wd) = x.dims4()?;
                let count = (n * h * wd) as f64;
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let xhat = centered.broadcast_div(&(var.clone() + BN_EPS)?.sqrt()?)?;

                let mean = mean.detach().flatten_all()?;
                let unbiased = (var.detach().flatten_all()? * (count / (count - 1.0).max(1.0)))?;
                let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (mean * BN_MOMENTUM)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (unbiased * BN_MOMENTUM)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;

                Ok(xhat.broadcast_mul(&w)?.broadcast_add(&bias)?)
            }
            Mode::Eval => {
                let rm = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
                let rv = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
                let scale = w.broadcast_div(&(rv + BN_EPS)?.sqrt()?)?;
                let shift = (bias - rm.broadcast_mul(&scale)?)?;
                Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
            }
        }
    }
}

/// Plain convolution with optional bias, no normalization or activation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        c1: usize,
        c2: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((c1 * k * k) as f64).sqrt();
        let weight = b.uniform(join(prefix, "weight"), &[c2, c1, k, k], bound, ParamKind::Weight)?;
        let bias = if bias {
            Some(b.uniform(join(prefix, "bias"), &[c2], bound, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    /// 1×1 convolution with weight and bias set to exactly zero.
    pub fn zeros(b: &mut Builder, prefix: &str, c1: usize, c2: usize) -> Result<Self> {
        let weight = b.constant(join(prefix, "weight"), &[c2, c1, 1, 1], 0.0, ParamKind::Weight)?;
        let bias = b.constant(join(prefix, "bias"), &[c2], 0.0, ParamKind::Bias)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: 0,
        })
    }

    /// Overrides the bias with a constant (used for detection-head priors).
    pub fn fill_bias(&self, value: f64) -> Result<()> {
        if let Some(bias) = &self.bias {
            let t = (bias.ones_like()? * value)?;
            bias.set(&t)?;
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(bias) => {
                let c = bias.dim(0)?;
                Ok(y.broadcast_add(&bias.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Convolution, batch normalization and SiLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        c1: usize,
        c2: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, &join(prefix, "conv"), c1, c2, k, stride, false)?,
            bn: BatchNorm::new(b, &join(prefix, "bn"), c2)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        Ok(self.bn.forward(&y, mode)?.silu()?)
    }
}

/// Channel-paired 1×1 reduction of two aligned streams: output channel `i`
/// mixes only channel `i` of each input. Equivalent to a grouped 1×1
/// convolution (groups = C) over the interleaved concatenation.
#[derive(Debug, Clone)]
pub struct PairMix {
    weight: Var,
    bn: BatchNorm,
}

impl PairMix {
    pub fn new(b: &mut Builder, prefix: &str, channels: usize) -> Result<Self> {
        let bound = 1.0 / 2f64.sqrt();
        Ok(Self {
            weight: b.uniform(
                join(prefix, "conv.weight"),
                &[channels, 2, 1, 1],
                bound,
                ParamKind::Weight,
            )?,
            bn: BatchNorm::new(b, &join(prefix, "bn"), channels)?,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let w = self.weight.as_tensor();
        let wa = w.narrow(1, 0, 1)?.reshape((1, c, 1, 1))?;
        let wb = w.narrow(1, 1, 1)?.reshape((1, c, 1, 1))?;
        let y = (a.broadcast_mul(&wa)? + b.broadcast_mul(&wb)?)?;
        Ok(self.bn.forward(&y, mode)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    cv1: ConvBn,
    cv2: ConvBn,
    residual: bool,
}

impl Bottleneck {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        c1: usize,
        c2: usize,
        shortcut: bool,
        e: f64,
    ) -> Result<Self> {
        let c_ = ((c2 as f64) * e) as usize;
        Ok(Self {
            cv1: ConvBn::new(b, &join(prefix, "cv1"), c1, c_, 3, 1)?,
            cv2: ConvBn::new(b, &join(prefix, "cv2"), c_, c2, 3, 1)?,
            residual: shortcut && c1 == c2,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x, mode)?, mode)?;
        if self.residual {
            Ok((x + y)?)
        } else {
            Ok(y)
        }
    }
}

/// CSP block with two parallel 1×1 paths and a bottleneck stack.
#[derive(Debug, Clone)]
pub struct C3k {
    cv1: ConvBn,
    cv2: ConvBn,
    cv3: ConvBn,
    m: Vec<Bottleneck>,
}

impl C3k {
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        c1: usize,
        c2: usize,
        n: usize,
        shortcut: bool,
    ) -> Result<Self> {
        let c_ = c2 / 2;
        let cv1 = ConvBn::new(b, &join(prefix, "cv1"), c1, c_, 1, 1)?;
        let cv2 = ConvBn::new(b, &join(prefix, "cv2"), c1, c_, 1, 1)?;
        let cv3 = ConvBn::new(b, &join(prefix, "cv3"), 2 * c_, c2, 1, 1)?;
        let m = (0..n)
            .map(|i| Bottleneck::new(b, &join(prefix, &format!("m.{i}")), c_, c_, shortcut, 1.0))
            .collect::<Result<_>>()?;
        Ok(Self { cv1, cv2, cv3, m })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.cv1.forward(x, mode)?;
        for block in &self.m {
            y = block.forward(&y, mode)?;
        }
        let z = self.cv2.forward(x, mode)?;
        self.cv3.forward(&Tensor::cat(&[y, z], 1)?, mode)
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Plain(Bottleneck),
    Nested(C3k),
}

/// Split-bottleneck block: one 1×1 conv splits the input in two halves, a
/// chain of inner blocks extends the second half, and every intermediate
/// result is concatenated into a final 1×1 conv.
#[derive(Debug, Clone)]
pub struct C3k2 {
    cv1: ConvBn,
    cv2: ConvBn,
    m: Vec<Inner>,
    hidden: usize,
}

impl C3k2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        prefix: &str,
        c1: usize,
        c2: usize,
        n: usize,
        c3k: bool,
        e: f64,
        shortcut: bool,
    ) -> Result<Self> {
        let c = ((c2 as f64) * e) as usize;
        let cv1 = ConvBn::new(b, &join(prefix, "cv1"), c1, 2 * c, 1, 1)?;
        let cv2 = ConvBn::new(b, &join(prefix, "cv2"), (2 + n) * c, c2, 1, 1)?;
        let m = (0..n)
            .map(|i| {
                let p = join(prefix, &format!("m.{i}"));
                Ok(if c3k {
                    Inner::Nested(C3k::new(b, &p, c, c, 2, shortcut)?)
                } else {
                    Inner::Plain(Bottleneck::new(b, &p, c, c, shortcut, 0.5)?)
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cv1,
            cv2,
            m,
            hidden: c,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.cv1.forward(x, mode)?;
        let mut parts = vec![
            y.narrow(1, 0, self.hidden)?,
            y.narrow(1, self.hidden, self.hidden)?,
        ];
        for block in &self.m {
            let last = parts.last().expect("non-empty");
            let next = match block {
                Inner::Plain(bt) => bt.forward(last, mode)?,
                Inner::Nested(c3k) => c3k.forward(last, mode)?,
            };
            parts.push(next);
        }
        self.cv2.forward(&Tensor::cat(&parts, 1)?, mode)
    }
}

/// Spatial pyramid pooling (fast): three chained 5×5 max-pools.
#[derive(Debug, Clone)]
pub struct Sppf {
    cv1: ConvBn,
    cv2: ConvBn,
    k: usize,
}

impl Sppf {
    pub fn new(b: &mut Builder, prefix: &str, c1: usize, c2: usize, k: usize) -> Result<Self> {
        let c_ = c1 / 2;
        Ok(Self {
            cv1: ConvBn::new(b, &join(prefix, "cv1"), c1, c_, 1, 1)?,
            cv2: ConvBn::new(b, &join(prefix, "cv2"), c_ * 4, c2, 1, 1)?,
            k,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.cv1.forward(x, mode)?;
        let y1 = ops::max_pool_same(&x, self.k)?;
        let y2 = ops::max_pool_same(&y1, self.k)?;
        let y3 = ops::max_pool_same(&y2, self.k)?;
        self.cv2.forward(&Tensor::cat(&[x, y1, y2, y3], D::Minus(3))?, mode)
    }
}
