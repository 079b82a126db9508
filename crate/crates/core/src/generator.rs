//! Multi-modal generator: one modal-independent encoder feeding two
//! SPADE-ResBlock decoders (appearance → RGB, geometry → depth).
//!
//! The encoder turns `label ⊕ noise` into a pyramid `s, s5 … s0`; each
//! decoder starts from `label ⊕ noise` resampled to the coarsest level and
//! climbs back to full resolution, with block `i` normalized by SPADE
//! conditioned on `s_i`.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{encode_label, DepthMap, LabelMap, NoiseTensor, RgbImage};
use crate::error::{contract, Result};
use crate::nn::{leaky_relu, no_grad, resize_nearest, BatchNorm, Conv2d, Init, Mode, ParamStore};

/// Number of stride-2 encoder stages (s4 … s0) and decoder blocks.
pub const NUM_SCALES: usize = 5;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub noise_channels: usize,
    /// Width of the full-resolution pre-stage `s`.
    pub stem_channels: usize,
    /// Width of every pyramid level `s5 … s0`.
    pub encoder_channels: usize,
    /// Channels of `up0 … up5`.
    pub decoder_channels: Vec<usize>,
    pub spade_hidden: usize,
    pub out_channels_appearance: usize,
    pub out_channels_geometry: usize,
    pub image_size: (usize, usize),
    pub eps: f64,
}

impl GeneratorConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            noise_channels: 64,
            stem_channels: 32,
            encoder_channels: 64,
            decoder_channels: vec![1024, 1024, 512, 256, 128, 64],
            spade_hidden: 128,
            out_channels_appearance: 3,
            out_channels_geometry: 1,
            image_size: (256, 512),
            eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_channels.len() != NUM_SCALES + 1 {
            contract!(
                "decoder_channels needs {} entries, got {}",
                NUM_SCALES + 1,
                self.decoder_channels.len()
            );
        }
        let (h, w) = self.image_size;
        let factor = 1 << NUM_SCALES;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            contract!("image size {h}x{w} must be a positive multiple of {factor}");
        }
        if self.num_classes == 0 || self.noise_channels == 0 {
            contract!("num_classes and noise_channels must be positive");
        }
        if self.eps <= 0.0 {
            contract!("eps must be positive");
        }
        Ok(())
    }

    /// Spatial size of pyramid level `s_i`, i in 0..=5.
    pub fn level_size(&self, i: usize) -> (usize, usize) {
        let (h, w) = self.image_size;
        let f = 1 << (NUM_SCALES - i);
        (h / f, w / f)
    }
}

/// Conv → BatchNorm → ReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn new(init: &mut Init, cin: usize, cout: usize, stride: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut init.sub("conv"), cin, cout, 3, stride, true)?,
            bn: BatchNorm::new(&mut init.sub("bn"), cout, eps, true)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// Feature pyramid of the modal-independent encoder.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    /// Full-resolution pre-stage.
    pub s: Tensor,
    /// `levels[i]` is `s_i`; `levels[5]` is full resolution, `levels[0]` the coarsest.
    pub levels: Vec<Tensor>,
}

impl EncoderFeatures {
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: ConvBlock,
    /// s5 (stride 1) followed by s4 … s0 (stride 2 each).
    blocks: Vec<ConvBlock>,
}

impl Encoder {
    fn new(init: &mut Init, cfg: &GeneratorConfig) -> Result<Self> {
        let cin = cfg.num_classes + cfg.noise_channels;
        let stem = ConvBlock::new(&mut init.sub("stem"), cin, cfg.stem_channels, 1, cfg.eps)?;
        let mut blocks = Vec::with_capacity(NUM_SCALES + 1);
        let mut prev = cfg.stem_channels;
        for i in 0..=NUM_SCALES {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ConvBlock::new(
                &mut init.sub(&format!("blocks.{i}")),
                prev,
                cfg.encoder_channels,
                stride,
                cfg.eps,
            )?);
            prev = cfg.encoder_channels;
        }
        Ok(Self { stem, blocks })
    }

    pub fn forward(&self, z_y: &Tensor, mode: Mode) -> Result<EncoderFeatures> {
        let s = self.stem.forward(z_y, mode)?;
        let mut levels = Vec::with_capacity(NUM_SCALES + 1);
        let mut x = s.clone();
        for block in &self.blocks {
            x = block.forward(&x, mode)?;
            levels.push(x.clone());
        }
        levels.reverse();
        Ok(EncoderFeatures { s, levels })
    }
}

/// Spatially-adaptive normalization: parameter-free batch normalization
/// whose per-pixel scale and shift are predicted from a conditioning tensor.
#[derive(Debug, Clone)]
pub struct Spade {
    norm: BatchNorm,
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    pub fn new(
        init: &mut Init,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        eps: f64,
    ) -> Result<Self> {
        let norm = BatchNorm::new(&mut init.sub("norm"), channels, eps, false)?;
        let shared = Conv2d::new(&mut init.sub("shared"), cond_channels, hidden, 3, 1, true)?;
        let gamma = Conv2d::new(&mut init.sub("gamma"), hidden, channels, 3, 1, true)?;
        // Unit scale at initialization so the block starts as plain BN.
        if let Some(b) = gamma.bias() {
            b.set(&b.ones_like()?)?;
        }
        let beta = Conv2d::new(&mut init.sub("beta"), hidden, channels, 3, 1, true)?;
        Ok(Self {
            norm,
            shared,
            gamma,
            beta,
        })
    }

    pub fn shared(&self) -> &Conv2d {
        &self.shared
    }

    pub fn gamma(&self) -> &Conv2d {
        &self.gamma
    }

    pub fn beta(&self) -> &Conv2d {
        &self.beta
    }

    /// `γ(e) · (h − μ) / √(σ² + eps) + β(e)` with batch statistics in
    /// training mode and running statistics in evaluation mode.
    pub fn forward(&self, h: &Tensor, cond: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, hh, hw) = h.dims4()?;
        let normalized = self.norm.forward(h, mode)?;
        let cond = resize_nearest(cond, hh, hw)?;
        let actv = self.shared.forward(&cond)?.relu()?;
        let gamma = self.gamma.forward(&actv)?;
        let beta = self.beta.forward(&actv)?;
        Ok(((normalized * gamma)? + beta)?)
    }
}

/// Residual block with SPADE before each convolution and a learned,
/// SPADE-conditioned shortcut when the channel count changes.
#[derive(Debug, Clone)]
pub struct SpadeResBlock {
    norm0: Spade,
    conv0: Conv2d,
    norm1: Spade,
    conv1: Conv2d,
    shortcut: Option<(Spade, Conv2d)>,
}

impl SpadeResBlock {
    fn new(
        init: &mut Init,
        fin: usize,
        fout: usize,
        cond: usize,
        hidden: usize,
        eps: f64,
    ) -> Result<Self> {
        let fmid = fin.min(fout);
        let shortcut = if fin != fout {
            Some((
                Spade::new(&mut init.sub("norm_s"), fin, cond, hidden, eps)?,
                Conv2d::new(&mut init.sub("conv_s"), fin, fout, 1, 1, false)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm0: Spade::new(&mut init.sub("norm0"), fin, cond, hidden, eps)?,
            conv0: Conv2d::new(&mut init.sub("conv0"), fin, fmid, 3, 1, true)?,
            norm1: Spade::new(&mut init.sub("norm1"), fmid, cond, hidden, eps)?,
            conv1: Conv2d::new(&mut init.sub("conv1"), fmid, fout, 3, 1, true)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor, mode: Mode) -> Result<Tensor> {
        let skip = match &self.shortcut {
            Some((norm, conv)) => conv.forward(&norm.forward(x, cond, mode)?)?,
            None => x.clone(),
        };
        let dx = self
            .conv0
            .forward(&leaky_relu(&self.norm0.forward(x, cond, mode)?, LEAKY_SLOPE)?)?;
        let dx = self
            .conv1
            .forward(&leaky_relu(&self.norm1.forward(&dx, cond, mode)?, LEAKY_SLOPE)?)?;
        Ok((skip + dx)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderHead {
    Appearance,
    Geometry,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    stem: Conv2d,
    blocks: Vec<SpadeResBlock>,
    out: Conv2d,
    coarse_size: (usize, usize),
}

impl Decoder {
    fn new(init: &mut Init, cfg: &GeneratorConfig, out_channels: usize) -> Result<Self> {
        let ch = &cfg.decoder_channels;
        let stem = Conv2d::new(
            &mut init.sub("stem"),
            cfg.num_classes + cfg.noise_channels,
            ch[0],
            3,
            1,
            true,
        )?;
        let blocks = (0..NUM_SCALES)
            .map(|i| {
                SpadeResBlock::new(
                    &mut init.sub(&format!("blocks.{i}")),
                    ch[i],
                    ch[i + 1],
                    cfg.encoder_channels,
                    cfg.spade_hidden,
                    cfg.eps,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(&mut init.sub("out"), ch[NUM_SCALES], out_channels, 3, 1, true)?;
        Ok(Self {
            stem,
            blocks,
            out,
            coarse_size: cfg.level_size(0),
        })
    }

    /// Intermediate tensors `up0 … up5` followed by the final output.
    pub fn forward_stages(
        &self,
        features: &EncoderFeatures,
        z_y: &Tensor,
        mode: Mode,
    ) -> Result<Vec<Tensor>> {
        let (h0, w0) = self.coarse_size;
        let mut stages = Vec::with_capacity(NUM_SCALES + 2);
        let mut x = self.stem.forward(&resize_nearest(z_y, h0, w0)?)?;
        for (i, block) in self.blocks.iter().enumerate() {
            stages.push(x.clone());
            let y = block.forward(&x, features.level(i), mode)?;
            let (_, _, h, w) = y.dims4()?;
            x = resize_nearest(&y, 2 * h, 2 * w)?;
        }
        stages.push(x.clone());
        let out = leaky_relu(&self.out.forward(&x)?, LEAKY_SLOPE)?.tanh()?;
        stages.push(out);
        Ok(stages)
    }

    pub fn forward(&self, features: &EncoderFeatures, z_y: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self
            .forward_stages(features, z_y, mode)?
            .pop()
            .expect("decoder produces an output"))
    }

    pub fn out_conv(&self) -> &Conv2d {
        &self.out
    }

    pub fn blocks(&self) -> &[SpadeResBlock] {
        &self.blocks
    }
}

/// Batched generator output in [-1, 1].
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// (B, 3, H, W)
    pub rgb: Tensor,
    /// (B, 1, H, W)
    pub depth: Tensor,
}

/// A single generated RGB-D pair.
#[derive(Debug, Clone)]
pub struct GeneratedPair {
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    encoder: Encoder,
    appearance: Decoder,
    geometry: Decoder,
    dtype: DType,
    device: Device,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng, dtype, device);
        let encoder = Encoder::new(&mut init.sub("encoder"), &config)?;
        let appearance = Decoder::new(
            &mut init.sub("appearance"),
            &config,
            config.out_channels_appearance,
        )?;
        let geometry = Decoder::new(
            &mut init.sub("geometry"),
            &config,
            config.out_channels_geometry,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            appearance,
            geometry,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self, head: DecoderHead) -> &Decoder {
        match head {
            DecoderHead::Appearance => &self.appearance,
            DecoderHead::Geometry => &self.geometry,
        }
    }

    /// Concatenates (B, N, H, W) one-hot labels with (B, C_z, H, W) noise
    /// after checking both against the configured size.
    pub fn conditioning(&self, label_onehot: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (b, n, h, w) = label_onehot.dims4()?;
        let (bz, cz, hz, wz) = noise.dims4()?;
        let cfg = &self.config;
        if n != cfg.num_classes || cz != cfg.noise_channels {
            contract!(
                "expected {} label and {} noise channels, got {n} and {cz}",
                cfg.num_classes,
                cfg.noise_channels
            );
        }
        if (h, w) != cfg.image_size || (hz, wz) != cfg.image_size || b != bz {
            contract!(
                "label {:?} and noise {:?} must both be (B, _, {}, {})",
                label_onehot.dims(),
                noise.dims(),
                cfg.image_size.0,
                cfg.image_size.1
            );
        }
        Ok(Tensor::cat(&[noise, label_onehot], 1)?)
    }

    pub fn encode(&self, label_onehot: &Tensor, noise: &Tensor, mode: Mode) -> Result<EncoderFeatures> {
        let z_y = self.conditioning(label_onehot, noise)?;
        self.encoder.forward(&z_y, mode)
    }

    pub fn decode(
        &self,
        features: &EncoderFeatures,
        label_onehot: &Tensor,
        noise: &Tensor,
        head: DecoderHead,
        mode: Mode,
    ) -> Result<Tensor> {
        let z_y = self.conditioning(label_onehot, noise)?;
        let coarse = features.level(0).dims4()?;
        if coarse.0 != z_y.dims()[0] || (coarse.2, coarse.3) != self.config.level_size(0) {
            contract!("encoder features do not match the label batch");
        }
        self.decoder(head).forward(features, &z_y, mode)
    }

    /// Encodes once and runs both decoders on the shared features.
    pub fn forward(&self, label_onehot: &Tensor, noise: &Tensor, mode: Mode) -> Result<GeneratorOutput> {
        let z_y = self.conditioning(label_onehot, noise)?;
        let features = self.encoder.forward(&z_y, mode)?;
        Ok(GeneratorOutput {
            rgb: self.appearance.forward(&features, &z_y, mode)?,
            depth: self.geometry.forward(&features, &z_y, mode)?,
        })
    }

    /// Single-image generation in evaluation mode.
    pub fn generate(&self, label: &LabelMap, noise: &NoiseTensor, max_depth_m: f32) -> Result<GeneratedPair> {
        if label.num_classes() != self.config.num_classes {
            contract!(
                "label map has {} classes, generator expects {}",
                label.num_classes(),
                self.config.num_classes
            );
        }
        let onehot = encode_label(label, self.dtype, &self.device)?.unsqueeze(0)?;
        let z = noise.tensor().to_dtype(self.dtype)?.unsqueeze(0)?;
        let out = no_grad(|| self.forward(&onehot, &z, Mode::Eval))?;
        Ok(GeneratedPair {
            rgb: RgbImage::from_tensor(&out.rgb.squeeze(0)?)?,
            depth: DepthMap::from_tensor(&out.depth.squeeze(0)?, max_depth_m)?,
        })
    }
}
