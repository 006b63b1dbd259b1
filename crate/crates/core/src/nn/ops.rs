//! Differentiable operations missing from the tensor backend.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::Result;

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

struct Atan;

impl CustomOp1 for Atan {
    fn name(&self) -> &'static str {
        "atan"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous_slice(v, layout)?.iter().map(|x| x.atan()).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(contiguous_slice(v, layout)?.iter().map(|x| x.atan()).collect())
            }
            _ => candle_core::bail!("atan: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let denom = (arg.sqr()? + 1.0)?;
        Ok(Some(grad_res.div(&denom)?))
    }
}

/// Element-wise arctangent with gradient `1 / (1 + x²)`.
pub fn atan(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Atan)?)
}

/// Max pooling with odd kernel `k`, stride 1 and "same" output size. Windows
/// are clipped at the border, which is equivalent to padding with -inf.
struct MaxPoolSame {
    k: usize,
}

impl MaxPoolSame {
    /// Index (into the input plane) of the first maximum of the window
    /// centered at `(y, x)`.
    fn argmax(&self, plane: &[f64], h: usize, w: usize, y: usize, x: usize) -> usize {
        let r = self.k / 2;
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        let mut best = y0 * w + x0;
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                let i = yy * w + xx;
                if plane[i] > plane[best] {
                    best = i;
                }
            }
        }
        best
    }

    fn run<T: Copy + PartialOrd>(&self, data: &[T], dims: &[usize]) -> Vec<T> {
        let (h, w) = (dims[2], dims[3]);
        let r = self.k / 2;
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks(h * w) {
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
                for x in 0..w {
                    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                    let mut m = plane[y0 * w + x0];
                    for yy in y0..=y1 {
                        for v in &plane[yy * w + x0..=yy * w + x1] {
                            if *v > m {
                                m = *v;
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }
}

impl CustomOp1 for MaxPoolSame {
    fn name(&self) -> &'static str {
        "max-pool-same"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        if dims.len() != 4 {
            candle_core::bail!("max-pool-same expects a rank-4 tensor, got {dims:?}");
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?, dims)),
            _ => candle_core::bail!("max-pool-same: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let input = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let grad = grad_res.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut out = vec![0f64; input.len()];
        for (p, (plane, gplane)) in input.chunks(h * w).zip(grad.chunks(h * w)).enumerate() {
            let base = p * h * w;
            for y in 0..h {
                for x in 0..w {
                    let i = self.argmax(plane, h, w, y, x);
                    out[base + i] += gplane[y * w + x];
                }
            }
        }
        let t = Tensor::from_vec(out, arg.shape(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t))
    }
}

pub fn max_pool_same(x: &Tensor, k: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPoolSame { k })?)
}

/// Nearest-neighbour 2× upsampling built from broadcasting, so the gradient
/// accumulates with other uses of `x`. The backend's own upsampling
/// overwrites previously accumulated gradient.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let max = x.max_keepdim(last)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(last)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_last(x)?.exp()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}
