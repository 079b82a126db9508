//! Single-pass CPU kernels, with hand-written gradients, for the
//! elementwise and normalization layers that dominate a training step once
//! the convolutions are fast.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("fused kernels need contiguous operands"),
    }
}

/// Runs `$body` with `T` bound to the element type of `$s`.
macro_rules! dispatch {
    ($s:expr, |$t:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(_) => {
                type $t = f32;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(_) => {
                type $t = f64;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("fused kernels support f32 and f64"),
        }
    };
}

fn fast_path(x: &Tensor) -> bool {
    x.device().is_cpu() && matches!(x.dtype(), DType::F32 | DType::F64)
}

struct LeakyRelu(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "fused-leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch!(s, |T| {
            let slope = T::from_f64(self.0);
            slice::<T>(s, l)?
                .iter()
                .map(|&v| if v > 0.0 { v } else { v * slope })
                .collect()
        });
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(x, &LeakyReluGrad(self.0))?))
    }
}

struct LeakyReluGrad(f64);

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "fused-leaky-relu-grad"
    }

    fn cpu_fwd(&self, gs: &CpuStorage, gl: &Layout, xs: &CpuStorage, xl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch!(gs, |T| {
            let slope = T::from_f64(self.0);
            slice::<T>(gs, gl)?
                .iter()
                .zip(slice::<T>(xs, xl)?)
                .map(|(&g, &v)| if v > 0.0 { g } else { g * slope })
                .collect()
        });
        Ok((out, gl.shape().clone()))
    }
}

/// `max(x, 0) + slope · min(x, 0)`; `slope = 0` gives ReLU.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !fast_path(x) {
        return Ok(x.maximum(&(x * slope)?)?);
    }
    Ok(x.contiguous()?.apply_op1(LeakyRelu(slope))?)
}

/// Nearest-neighbour upsampling of (B, C, H, W) by integer factors.
struct Upsample {
    fy: usize,
    fx: usize,
}

impl CustomOp1 for Upsample {
    fn name(&self) -> &'static str {
        "fused-upsample-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = (h * self.fy, w * self.fx);
        let out = dispatch!(s, |T| {
            let x = slice::<T>(s, l)?;
            let mut out = Vec::with_capacity(b * c * oh * ow);
            for plane in x.chunks_exact(h * w) {
                for row in plane.chunks_exact(w) {
                    let start = out.len();
                    for &v in row {
                        out.extend(std::iter::repeat_n(v, self.fx));
                    }
                    for _ in 1..self.fy {
                        out.extend_from_within(start..start + ow);
                    }
                }
            }
            out
        });
        Ok((out, Shape::from((b, c, oh, ow))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum { fy: self.fy, fx: self.fx })?))
    }
}

struct BlockSum {
    fy: usize,
    fx: usize,
}

impl CustomOp1 for BlockSum {
    fn name(&self) -> &'static str {
        "fused-block-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, oh, ow) = l.shape().dims4()?;
        let (h, w) = (oh / self.fy, ow / self.fx);
        let out = dispatch!(s, |T| {
            let g = slice::<T>(s, l)?;
            let mut out: Vec<T> = vec![0.0; b * c * h * w];
            for (src, dst) in g.chunks_exact(oh * ow).zip(out.chunks_exact_mut(h * w)) {
                for (oy, row) in src.chunks_exact(ow).enumerate() {
                    let drow = &mut dst[(oy / self.fy) * w..(oy / self.fy + 1) * w];
                    for (d, block) in drow.iter_mut().zip(row.chunks_exact(self.fx)) {
                        for &v in block {
                            *d += v;
                        }
                    }
                }
            }
            out
        });
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbour resize to an integer multiple of the input size.
pub fn upsample_nearest(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if !fast_path(x) || height % h != 0 || width % w != 0 {
        return Ok(x.upsample_nearest2d(height, width)?);
    }
    Ok(x.contiguous()?.apply_op1(Upsample {
        fy: height / h,
        fx: width / w,
    })?)
}

/// Per-channel mean and biased variance of a (B, C, H, W) tensor,
/// accumulated in f64.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let values = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let count = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, p) in values.chunks_exact(plane).enumerate() {
        mean[i % c] += p.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, p) in values.chunks_exact(plane).enumerate() {
        let m = mean[i % c];
        var[i % c] += p.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// `(x − μ_c) / √(σ²_c + eps)` where μ and σ² are the batch moments of `x`
/// itself; the gradient accounts for their dependence on `x`.
struct BatchNormalize {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl CustomOp1 for BatchNormalize {
    fn name(&self) -> &'static str {
        "fused-batch-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = l.shape().dims4()?;
        let out = dispatch!(s, |T| {
            let x = slice::<T>(s, l)?;
            let mut out = Vec::with_capacity(x.len());
            for (i, p) in x.chunks_exact(h * w).enumerate() {
                let (m, k) = (T::from_f64(self.mean[i % c]), T::from_f64(self.inv_std[i % c]));
                out.extend(p.iter().map(|&v| (v - m) * k));
            }
            out
        });
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, y: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = BatchNormalizeGrad {
            inv_std: self.inv_std.clone(),
        };
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(y, &op)?))
    }
}

struct BatchNormalizeGrad {
    inv_std: Vec<f64>,
}

impl CustomOp2 for BatchNormalizeGrad {
    fn name(&self) -> &'static str {
        "fused-batch-normalize-grad"
    }

    /// `dx = k · (g − mean(g) − y · mean(g · y))` per channel.
    fn cpu_fwd(&self, gs: &CpuStorage, gl: &Layout, ys: &CpuStorage, yl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = gl.shape().dims4()?;
        let plane = h * w;
        let count = (b * plane) as f64;
        let out = dispatch!(gs, |T| {
            let g = slice::<T>(gs, gl)?;
            let y = slice::<T>(ys, yl)?;
            let mut sum_g = vec![0.0; c];
            let mut sum_gy = vec![0.0; c];
            for (i, (gp, yp)) in g.chunks_exact(plane).zip(y.chunks_exact(plane)).enumerate() {
                for (&a, &b) in gp.iter().zip(yp) {
                    sum_g[i % c] += a.to_f64();
                    sum_gy[i % c] += a.to_f64() * b.to_f64();
                }
            }
            let mut out = Vec::with_capacity(g.len());
            for (i, (gp, yp)) in g.chunks_exact(plane).zip(y.chunks_exact(plane)).enumerate() {
                let ch = i % c;
                let k = T::from_f64(self.inv_std[ch]);
                let mg = T::from_f64(sum_g[ch] / count);
                let mgy = T::from_f64(sum_gy[ch] / count);
                out.extend(gp.iter().zip(yp).map(|(&a, &b)| k * (a - mg - b * mgy)));
            }
            out
        });
        Ok((out, gl.shape().clone()))
    }
}

/// Normalizes with the batch moments, returning the result together with
/// the (detached) mean and biased variance that were used.
pub fn batch_normalize(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (mean, var) = channel_moments(x)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let y = x.contiguous()?.apply_op1(BatchNormalize {
        mean: mean.clone(),
        inv_std,
    })?;
    Ok((y, mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    fn check<F, G>(shape: (usize, usize, usize, usize), fused: F, reference: G) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
        G: Fn(&Tensor) -> Result<Tensor>,
    {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, shape, &dev)?;
        let a = fused(x.as_tensor())?;
        let b = reference(x.as_tensor())?;
        assert!(max_diff(&a, &b) < 1e-12);
        let probe = Tensor::randn(0f64, 1.0, a.shape(), &dev)?;
        let ga = (a * &probe)?.sum_all()?.backward()?;
        let gb = (b * &probe)?.sum_all()?.backward()?;
        let d = max_diff(ga.get(x.as_tensor()).unwrap(), gb.get(x.as_tensor()).unwrap());
        assert!(d < 1e-10, "gradient differs by {d}");
        Ok(())
    }

    #[test]
    fn leaky_relu_matches_composite() -> Result<()> {
        check((2, 3, 4, 5), |x| leaky_relu(x, 0.2), |x| Ok(x.maximum(&(x * 0.2)?)?))?;
        check((1, 2, 3, 3), |x| leaky_relu(x, 0.0), |x| Ok(x.relu()?))
    }

    #[test]
    fn upsample_matches_library() -> Result<()> {
        check((2, 3, 4, 5), |x| upsample_nearest(x, 8, 10), |x| Ok(x.upsample_nearest2d(8, 10)?))?;
        check((1, 2, 3, 2), |x| upsample_nearest(x, 12, 6), |x| {
            let rows = Tensor::new((0..12u32).map(|i| i / 4).collect::<Vec<_>>(), x.device())?;
            let cols = Tensor::new((0..6u32).map(|j| j / 3).collect::<Vec<_>>(), x.device())?;
            Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
        })
    }

    #[test]
    fn batch_normalize_matches_composite() -> Result<()> {
        let eps = 1e-5;
        check(
            (3, 4, 5, 6),
            |x| Ok(batch_normalize(x, eps)?.0),
            |x| {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
                Ok(x.broadcast_sub(&mean)?.broadcast_div(&(var + eps)?.sqrt()?)?)
            },
        )
    }
}
