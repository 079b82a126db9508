//! Direct CPU convolution built on im2col/col2im and a blocked GEMM.
//!
//! Columns are materialized a few thousand output pixels at a time so that
//! full-resolution layers do not need a K×(H·W) buffer. The backward pass
//! is a pair of separate ops (input and weight gradients) that run only for
//! operands that actually require a gradient.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};
use gemm::{gemm, Parallelism};

use crate::error::Result;

/// Target size of one im2col block; small enough to stay in L2.
const BLOCK_BYTES: usize = 512 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[batch, cin, h, w], &[cout, wc, k, k2]) = (x, weight) else {
            candle_core::bail!("convolution expects rank-4 input and weight, got {x:?} and {weight:?}");
        };
        if wc != cin || k != k2 {
            candle_core::bail!("weight {weight:?} does not fit input {x:?}");
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("kernel {k} larger than padded input {h}x{w}");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { batch, cin, cout, h, w, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Output pixels per im2col block.
    fn chunk<T>(&self) -> usize {
        (BLOCK_BYTES / (self.rows() * std::mem::size_of::<T>())).clamp(64, 4096)
    }

    /// Calls `f(j, iy, ox0, n)` for every run of `n` consecutive output
    /// pixels of one output row inside `p0 .. p0 + len`. `j` is the offset
    /// of the run in the block and `iy` the input row for kernel row `ky`.
    #[inline]
    fn runs(&self, ky: usize, p0: usize, len: usize, mut f: impl FnMut(usize, Option<usize>, usize, usize)) {
        let mut p = p0;
        while p < p0 + len {
            let (oy, ox0) = (p / self.wo, p % self.wo);
            let n = (self.wo - ox0).min(p0 + len - p);
            let iy = (oy * self.stride + ky).checked_sub(self.pad).filter(|&iy| iy < self.h);
            f(p - p0, iy, ox0, n);
            p += n;
        }
    }

    /// Range of output columns whose input column is inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(kx)).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Fills `cols` (rows × len, row-major) for pixels `p0 .. p0 + len`.
    fn im2col<T: Copy + Default>(&self, image: &[T], p0: usize, len: usize, cols: &mut [T]) {
        let kk = self.k * self.k;
        let plane_len = self.h * self.w;
        for r in 0..self.rows() {
            let (c, kyx) = (r / kk, r % kk);
            let (ky, kx) = (kyx / self.k, kyx % self.k);
            let plane = &image[c * plane_len..(c + 1) * plane_len];
            let row = &mut cols[r * len..(r + 1) * len];
            let (lo, hi) = self.valid_ox(kx);
            self.runs(ky, p0, len, |j, iy, ox0, n| {
                let dst = &mut row[j..j + n];
                let Some(iy) = iy else {
                    dst.fill(T::default());
                    return;
                };
                let src = &plane[iy * self.w..(iy + 1) * self.w];
                let (a, b) = (lo.clamp(ox0, ox0 + n), hi.clamp(ox0, ox0 + n));
                dst[..a - ox0].fill(T::default());
                dst[b - ox0..].fill(T::default());
                let first = a * self.stride + kx - self.pad;
                if self.stride == 1 {
                    dst[a - ox0..b - ox0].copy_from_slice(&src[first..first + (b - a)]);
                } else {
                    for (d, s) in dst[a - ox0..b - ox0].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                        *d = *s;
                    }
                }
            });
        }
    }

    fn col2im<T: Copy + std::ops::AddAssign>(&self, cols: &[T], p0: usize, len: usize, image: &mut [T]) {
        let kk = self.k * self.k;
        let plane_len = self.h * self.w;
        for r in 0..self.rows() {
            let (c, kyx) = (r / kk, r % kk);
            let (ky, kx) = (kyx / self.k, kyx % self.k);
            let plane = &mut image[c * plane_len..(c + 1) * plane_len];
            let row = &cols[r * len..(r + 1) * len];
            let (lo, hi) = self.valid_ox(kx);
            self.runs(ky, p0, len, |j, iy, ox0, n| {
                let Some(iy) = iy else { return };
                let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                let (a, b) = (lo.clamp(ox0, ox0 + n), hi.clamp(ox0, ox0 + n));
                let first = a * self.stride + kx - self.pad;
                let src = &row[j + a - ox0..j + b - ox0];
                for (d, s) in dst[first..].iter_mut().step_by(self.stride).zip(src) {
                    *d += *s;
                }
            });
        }
    }
}

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)` with explicit strides
/// given as (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn matmul<T: 'static + WithDType>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    dst_s: (usize, usize),
    accumulate: bool,
    lhs: &[T],
    lhs_s: (usize, usize),
    rhs: &[T],
    rhs_s: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |s: (usize, usize), rows: usize, cols: usize| (rows - 1) * s.0 + (cols - 1) * s.1 + 1;
    assert!(dst.len() >= extent(dst_s, m, n));
    assert!(k == 0 || lhs.len() >= extent(lhs_s, m, k));
    assert!(k == 0 || rhs.len() >= extent(rhs_s, k, n));
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_s.1 as isize,
            dst_s.0 as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_s.1 as isize,
            lhs_s.0 as isize,
            rhs.as_ptr(),
            rhs_s.1 as isize,
            rhs_s.0 as isize,
            if accumulate { T::one() } else { T::zero() },
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("convolution operands must be contiguous"),
    }
}

fn forward<T: 'static + WithDType + Default>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (rows, pixels) = (g.rows(), g.pixels());
    let chunk = g.chunk::<T>();
    let mut out = vec![T::zero(); g.batch * g.cout * pixels];
    let mut cols = vec![T::zero(); rows * chunk.min(pixels)];
    let image_len = g.cin * g.h * g.w;
    for n in 0..g.batch {
        let image = &x[n * image_len..(n + 1) * image_len];
        let dst = &mut out[n * g.cout * pixels..(n + 1) * g.cout * pixels];
        for p0 in (0..pixels).step_by(chunk) {
            let len = chunk.min(pixels - p0);
            g.im2col(image, p0, len, &mut cols[..rows * len]);
            matmul(
                (g.cout, len, rows),
                &mut dst[p0..],
                (pixels, 1),
                false,
                w,
                (rows, 1),
                &cols[..rows * len],
                (len, 1),
            );
        }
    }
    out
}

fn grad_input<T: 'static + WithDType + Default + std::ops::AddAssign>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let (rows, pixels) = (g.rows(), g.pixels());
    let chunk = g.chunk::<T>();
    let image_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * image_len];
    let mut cols = vec![T::zero(); rows * chunk.min(pixels)];
    for n in 0..g.batch {
        let gn = &grad[n * g.cout * pixels..(n + 1) * g.cout * pixels];
        let image = &mut out[n * image_len..(n + 1) * image_len];
        for p0 in (0..pixels).step_by(chunk) {
            let len = chunk.min(pixels - p0);
            // cols (rows × len) = Wᵀ (rows × cout) · G (cout × len)
            matmul(
                (rows, len, g.cout),
                &mut cols[..rows * len],
                (len, 1),
                false,
                w,
                (1, rows),
                &gn[p0..],
                (pixels, 1),
            );
            g.col2im(&cols[..rows * len], p0, len, image);
        }
    }
    out
}

fn grad_weight<T: 'static + WithDType + Default>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (rows, pixels) = (g.rows(), g.pixels());
    let chunk = g.chunk::<T>();
    let image_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.cout * rows];
    let mut cols = vec![T::zero(); rows * chunk.min(pixels)];
    let mut first = true;
    for n in 0..g.batch {
        let image = &x[n * image_len..(n + 1) * image_len];
        let gn = &grad[n * g.cout * pixels..(n + 1) * g.cout * pixels];
        for p0 in (0..pixels).step_by(chunk) {
            let len = chunk.min(pixels - p0);
            g.im2col(image, p0, len, &mut cols[..rows * len]);
            // dW (cout × rows) += G (cout × len) · colsᵀ (len × rows)
            matmul(
                (g.cout, rows, len),
                &mut out,
                (rows, 1),
                !first,
                &gn[p0..],
                (pixels, 1),
                &cols[..rows * len],
                (1, len),
            );
            first = false;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, xs: &CpuStorage, xl: &Layout, ws: &CpuStorage, wl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(xl.dims(), wl.dims(), self.stride, self.pad)?;
        let shape = Shape::from((g.batch, g.cout, g.ho, g.wo));
        let out = match (xs, ws) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(&g, contiguous(xs, xl)?, contiguous(ws, wl)?))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(&g, contiguous(xs, xl)?, contiguous(ws, wl)?))
            }
            _ => candle_core::bail!("convolution supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(w, &GradInput { conv: *self, input: x.dims().to_vec() })?)
        } else {
            None
        };
        let gw = if w.track_op() {
            Some(x.apply_op2_no_bwd(&grad, &GradWeight { conv: *self, weight: w.dims().to_vec() })?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

struct GradInput {
    conv: Conv,
    input: Vec<usize>,
}

impl CustomOp2 for GradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(&self, gs: &CpuStorage, gl: &Layout, ws: &CpuStorage, wl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.input, wl.dims(), self.conv.stride, self.conv.pad)?;
        let out = match (gs, ws) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(grad_input(&g, contiguous(gs, gl)?, contiguous(ws, wl)?))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(grad_input(&g, contiguous(gs, gl)?, contiguous(ws, wl)?))
            }
            _ => candle_core::bail!("convolution supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(self.input.clone())))
    }
}

struct GradWeight {
    conv: Conv,
    weight: Vec<usize>,
}

impl CustomOp2 for GradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, xs: &CpuStorage, xl: &Layout, gs: &CpuStorage, gl: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(xl.dims(), &self.weight, self.conv.stride, self.conv.pad)?;
        let out = match (xs, gs) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(grad_weight(&g, contiguous(xs, xl)?, contiguous(gs, gl)?))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(grad_weight(&g, contiguous(xs, xl)?, contiguous(gs, gl)?))
            }
            _ => candle_core::bail!("convolution supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(self.weight.clone())))
    }
}

/// 2-D cross-correlation of (B, C, H, W) with (O, C, k, k), zero padding
/// `pad` on every side. Falls back to the library kernel off the CPU or for
/// other dtypes.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let fast = x.device().is_cpu() && matches!(x.dtype(), DType::F32 | DType::F64) && x.dtype() == weight.dtype();
    if !fast {
        return Ok(x.conv2d(weight, pad, stride, 1, 1)?);
    }
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Conv { stride, pad })?)
}
