//! Layer primitives shared by the generator and the discriminator.
//!
//! Parameters live in a [`ParamStore`] as named [`Var`]s so that optimizers,
//! EMA and checkpoints can walk them in a fixed order. Non-trainable state
//! (batch-norm running statistics, spectral-norm power-iteration vectors) is
//! kept as named buffers behind a mutex, which lets forward passes take
//! `&self` while still updating that state in training mode.

use std::cell::Cell;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};

pub type Buffer = Arc<Mutex<Tensor>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Buffer)>,
}

impl ParamStore {
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Buffer)] {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every parameter and buffer with the values held by `other`.
    /// Both stores must come from identically configured modules.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        check_same_layout(self, other)?;
        for ((_, dst), (_, src)) in self.params.iter().zip(other.params.iter()) {
            dst.set(&src.as_tensor().copy()?)?;
        }
        for ((_, dst), (_, src)) in self.buffers.iter().zip(other.buffers.iter()) {
            let value = src.lock().expect("buffer lock").copy()?;
            *dst.lock().expect("buffer lock") = value;
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over the raw bytes of every parameter.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for (name, var) in &self.params {
            for byte in name.bytes().chain(tensor_le_bytes(var.as_tensor())?) {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        Ok(hash)
    }
}

fn check_same_layout(a: &ParamStore, b: &ParamStore) -> Result<()> {
    if a.params.len() != b.params.len() || a.buffers.len() != b.buffers.len() {
        contract!("parameter stores have different sizes");
    }
    for ((na, va), (nb, vb)) in a.params.iter().zip(b.params.iter()) {
        if na != nb || va.shape() != vb.shape() {
            contract!("parameter `{na}` does not match `{nb}`");
        }
    }
    Ok(())
}

/// Little-endian bytes of a tensor's contents in row-major order.
pub fn tensor_le_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .collect(),
        other => contract!("unsupported dtype {other:?}"),
    })
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with parameters read as constants, so that forward passes
/// record no autograd graph and intermediates are freed as soon as
/// possible. Nests; the previous state is restored afterwards.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|g| g.replace(true)));
    f()
}

/// The tensor a layer should compute with: the variable itself, or a
/// detached view inside [`no_grad`].
fn live(v: &Var) -> Tensor {
    if NO_GRAD.with(Cell::get) {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

/// Registers parameters under a dotted name prefix while drawing initial
/// values from a seeded generator.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    device: &'a Device,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha8Rng,
        dtype: DType,
        device: &'a Device,
    ) -> Self {
        Self {
            store,
            rng,
            dtype,
            device,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        Init {
            prefix: self.path(name),
            store: self.store,
            rng: self.rng,
            dtype: self.dtype,
            device: self.device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        self.device
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t = Tensor::from_vec(values, shape, self.device)?.to_dtype(self.dtype)?;
        self.register(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, self.device)? * value)?;
        self.register(name, t)
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.store.params.push((self.path(name), var.clone()));
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, t: Tensor) -> Buffer {
        let buf = Arc::new(Mutex::new(t));
        self.store.buffers.push((self.path(name), buf.clone()));
        buf
    }

    pub fn unit_vector(&mut self, len: usize) -> Result<Tensor> {
        let values: Vec<f64> = (0..len)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t = Tensor::from_vec(values, len, self.device)?.to_dtype(self.dtype)?;
        l2_normalize(&t)
    }
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Square-kernel convolution with "same" padding for odd kernels.
    pub fn new(
        init: &mut Init,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.normal(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            INIT_STD,
        )?;
        let bias = if bias {
            Some(init.constant("bias", &[out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, &live(&self.weight))
    }

    fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let in_channels = weight.dims()[1];
        if x.rank() != 4 || x.dims()[1] != in_channels {
            contract!(
                "convolution expects (B, {in_channels}, H, W), got {:?}",
                x.dims()
            );
        }
        let y = crate::conv::conv2d(x, weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&live(b).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over (n, y, x) per channel with optional affine
/// parameters and running statistics for evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    affine: Option<(Var, Var)>,
    running_mean: Buffer,
    running_var: Buffer,
    eps: f64,
    momentum: f64,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(init: &mut Init, channels: usize, eps: f64, affine: bool) -> Result<Self> {
        let affine = if affine {
            Some((
                init.constant("weight", &[channels], 1.0)?,
                init.constant("bias", &[channels], 0.0)?,
            ))
        } else {
            None
        };
        let zeros = Tensor::zeros((1, channels, 1, 1), init.dtype(), init.device())?;
        let ones = Tensor::ones((1, channels, 1, 1), init.dtype(), init.device())?;
        Ok(Self {
            affine,
            running_mean: init.buffer("running_mean", zeros),
            running_var: init.buffer("running_var", ones),
            eps,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let normalized = match mode {
            Mode::Train => {
                let (y, mean, var) = crate::fused::batch_normalize(x, self.eps)?;
                let c = mean.len();
                let as_tensor = |v: Vec<f64>| -> Result<Tensor> {
                    Ok(Tensor::from_vec(v, (1, c, 1, 1), x.device())?.to_dtype(x.dtype())?)
                };
                let stats = BatchStats {
                    mean: as_tensor(mean)?,
                    var: as_tensor(var)?,
                };
                self.track(&stats, x)?;
                y
            }
            Mode::Eval => {
                let mean = self.running_mean.lock().expect("buffer lock").clone();
                let var = self.running_var.lock().expect("buffer lock").clone();
                normalize_with(x, &mean, &var, self.eps)?
            }
        };
        match &self.affine {
            Some((w, b)) => Ok(normalized
                .broadcast_mul(&live(w).reshape((1, (), 1, 1))?)?
                .broadcast_add(&live(b).reshape((1, (), 1, 1))?)?),
            None => Ok(normalized),
        }
    }

    fn track(&self, stats: &BatchStats, x: &Tensor) -> Result<()> {
        let (n, _, h, w) = x.dims4()?;
        let count = (n * h * w) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = self.momentum;
        let mut rm = self.running_mean.lock().expect("buffer lock");
        *rm = ((&*rm * (1.0 - m))? + (stats.mean.detach() * m)?)?;
        let mut rv = self.running_var.lock().expect("buffer lock");
        *rv = ((&*rv * (1.0 - m))? + (stats.var.detach() * (m * unbias))?)?;
        Ok(())
    }
}

pub struct BatchStats {
    /// Shape (1, C, 1, 1).
    pub mean: Tensor,
    /// Biased variance, shape (1, C, 1, 1).
    pub var: Tensor,
}

pub fn batch_statistics(x: &Tensor) -> Result<BatchStats> {
    if x.rank() != 4 {
        contract!("batch statistics expect a 4-d tensor, got {:?}", x.dims());
    }
    let mean = x.mean_keepdim((0, 2, 3))?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
    Ok(BatchStats { mean, var })
}

pub fn normalize_with(x: &Tensor, mean: &Tensor, var: &Tensor, eps: f64) -> Result<Tensor> {
    let denom = (var + eps)?.sqrt()?;
    Ok(x.broadcast_sub(mean)?.broadcast_div(&denom)?)
}

/// Convolution whose weight is divided by a one-step power-iteration
/// estimate of its largest singular value.
#[derive(Debug, Clone)]
pub struct SpectralConv2d {
    conv: Conv2d,
    u: Buffer,
}

const SN_EPS: f64 = 1e-12;
const SN_INIT_ITERS: usize = 100;

impl SpectralConv2d {
    pub fn new(
        init: &mut Init,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(init, in_channels, out_channels, kernel, 1, true)?;
        let mut u = init.unit_vector(out_channels)?;
        let wm = conv.weight.as_tensor().flatten_from(1)?.detach();
        for _ in 0..SN_INIT_ITERS {
            u = power_iteration(&wm, &u)?.0;
        }
        let u = init.buffer("sn_u", u);
        Ok(Self { conv, u })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    /// The weight actually applied in the current state.
    pub fn normalized_weight(&self, mode: Mode) -> Result<Tensor> {
        let w = &live(&self.conv.weight);
        let wm = w.flatten_from(1)?;
        let wm_const = wm.detach();
        let mut u = self.u.lock().expect("buffer lock");
        let (u_next, v) = match mode {
            Mode::Train => {
                let (u_next, v) = power_iteration(&wm_const, &u)?;
                *u = u_next.detach();
                (u_next, v)
            }
            Mode::Eval => {
                let v = l2_normalize(&wm_const.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
                (u.clone(), v)
            }
        };
        let sigma = u_next
            .unsqueeze(0)?
            .matmul(&wm.matmul(&v.unsqueeze(1)?)?)?
            .reshape(())?;
        let sigma = sigma.maximum(SN_EPS)?;
        Ok(w.broadcast_div(&sigma)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = self.normalized_weight(mode)?;
        self.conv.forward_with_weight(x, &w)
    }
}

/// One power-iteration step on `wm` (out × k): returns `(u', v)`.
pub fn power_iteration(wm: &Tensor, u: &Tensor) -> Result<(Tensor, Tensor)> {
    let v = l2_normalize(&wm.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
    let u = l2_normalize(&wm.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
    Ok((u, v))
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?.maximum(SN_EPS)?;
    Ok(x.broadcast_div(&norm)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    crate::fused::leaky_relu(x, slope)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    crate::fused::leaky_relu(x, 0.0)
}

/// Nearest-neighbour resize of a (B, C, H, W) tensor, matching the
/// `floor(dst * in / out)` source rule. Differentiable.
pub fn resize_nearest(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    if height % h == 0 && width % w == 0 {
        return crate::fused::upsample_nearest(x, height, width);
    }
    let rows: Vec<u32> = (0..height).map(|i| (i * h / height) as u32).collect();
    let cols: Vec<u32> = (0..width).map(|j| (j * w / width) as u32).collect();
    let rows = Tensor::new(rows, x.device())?;
    let cols = Tensor::new(cols, x.device())?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Row-stochastic (out × in) matrix performing 1-d linear interpolation
/// with half-pixel centres.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

/// (out × in) averaging matrix for adaptive average pooling.
pub fn adaptive_pool_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    for i in 0..output {
        let start = i * input / output;
        let end = ((i + 1) * input).div_ceil(output);
        let weight = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * input + j] = weight;
        }
    }
    m
}

/// Applies separable row/column matrices: `rows · x · colsᵀ` per channel.
fn separable(x: &Tensor, rows: Vec<f64>, cols: Vec<f64>, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let ah = Tensor::from_vec(rows, (height, h), dev)?.to_dtype(x.dtype())?;
    let aw_t = Tensor::from_vec(cols, (width, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let y = x.contiguous()?.broadcast_matmul(&aw_t)?;
    Ok(ah.broadcast_matmul(&y)?)
}

/// Bilinear resize (half-pixel centres, no corner alignment). Differentiable.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    separable(
        x,
        bilinear_matrix(h, height),
        bilinear_matrix(w, width),
        height,
        width,
    )
}

pub fn adaptive_avg_pool(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    separable(
        x,
        adaptive_pool_matrix(h, height),
        adaptive_pool_matrix(w, width),
        height,
        width,
    )
}

/// Numerically stable log-softmax along the channel dimension.
pub fn log_softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_channels(logits)?.exp()?)
}

/// Sum of all elements as an `f64`, whatever the dtype.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Largest-magnitude singular value estimate after `iters` power iterations.
pub fn top_singular_value(wm: &Tensor, iters: usize) -> Result<f64> {
    let wm = wm.to_dtype(DType::F64)?;
    let (out, _) = wm.dims2()?;
    let mut u = l2_normalize(&Tensor::ones(out, DType::F64, wm.device())?)?;
    let mut v = u.clone();
    for _ in 0..iters {
        (u, v) = power_iteration(&wm, &u)?;
    }
    let sigma = u
        .unsqueeze(0)?
        .matmul(&wm.matmul(&v.unsqueeze(1)?)?)?
        .reshape(())?;
    Ok(sigma.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn init_store(seed: u64) -> (ParamStore, ChaCha8Rng) {
        (ParamStore::default(), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn no_grad_detaches_parameters_and_restores_on_exit() -> Result<()> {
        let v = Var::new(&[1f32, 2.0], &Device::Cpu)?;
        assert!(live(&v).is_variable());
        no_grad(|| {
            assert!(!live(&v).is_variable());
            no_grad(|| assert!(!live(&v).is_variable()));
            assert!(!live(&v).is_variable());
        });
        assert!(live(&v).is_variable());
        Ok(())
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(4, 8), (8, 4), (3, 7), (32, 256)] {
            let m = bilinear_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_rule() {
        // 2 -> 4 with half-pixel centres: [a, .75a+.25b, .25a+.75b, b]
        let m = bilinear_matrix(2, 4);
        assert_eq!(m, vec![1.0, 0.0, 0.75, 0.25, 0.25, 0.75, 0.0, 1.0]);
    }

    #[test]
    fn adaptive_pool_bins_overlap_like_reference() {
        // 5 -> 3: bins [0,2), [1,4), [3,5)
        let m = adaptive_pool_matrix(5, 3);
        assert_eq!(&m[0..5], &[0.5, 0.5, 0.0, 0.0, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(&m[5..10], &[0.0, third, third, third, 0.0]);
        assert_eq!(&m[10..15], &[0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn resize_nearest_downsamples_by_stride() -> Result<()> {
        let x = Tensor::arange(0f32, 16f32, &Device::Cpu)?.reshape((1, 1, 4, 4))?;
        let y = resize_nearest(&x, 2, 2)?;
        assert_eq!(y.flatten_all()?.to_vec1::<f32>()?, vec![0., 2., 8., 10.]);
        Ok(())
    }

    #[test]
    fn batch_norm_train_standardizes_channels() -> Result<()> {
        let (mut store, mut rng) = init_store(0);
        let dev = Device::Cpu;
        let mut init = Init::new(&mut store, &mut rng, DType::F64, &dev);
        let bn = BatchNorm::new(&mut init, 2, 1e-5, true)?;
        let x = Tensor::randn(3.0f64, 2.0, (4, 2, 3, 3), &dev)?;
        let y = bn.forward(&x, Mode::Train)?;
        let stats = batch_statistics(&y)?;
        for m in stats.mean.flatten_all()?.to_vec1::<f64>()? {
            assert!(m.abs() < 1e-10);
        }
        for v in stats.var.flatten_all()?.to_vec1::<f64>()? {
            assert!((v - 1.0).abs() < 1e-3);
        }
        Ok(())
    }

    #[test]
    fn spectral_conv_zero_weight_gives_bias_only() -> Result<()> {
        let (mut store, mut rng) = init_store(1);
        let dev = Device::Cpu;
        let mut init = Init::new(&mut store, &mut rng, DType::F32, &dev);
        let conv = SpectralConv2d::new(&mut init, 3, 4, 3)?;
        conv.conv().weight().set(&conv.conv().weight().zeros_like()?)?;
        let x = Tensor::ones((1, 3, 5, 5), DType::F32, &dev)?;
        let y = conv.forward(&x, Mode::Train)?;
        assert_eq!(scalar(&y.abs()?)?, 0.0);
        Ok(())
    }

    #[test]
    fn log_softmax_is_normalized() -> Result<()> {
        let x = Tensor::randn(0f64, 5.0, (2, 4, 3, 3), &Device::Cpu)?;
        let p = softmax_channels(&x)?.sum_keepdim(1)?;
        for v in p.flatten_all()?.to_vec1::<f64>()? {
            assert!((v - 1.0).abs() < 1e-12);
        }
        Ok(())
    }
}
