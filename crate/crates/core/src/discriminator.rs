//! Segmentation discriminator with a learnable VGG-style backbone.
//!
//! The backbone is a stack of spectrally normalized ConvBlocks with max
//! pooling between resolution stages; its per-stage outputs ("taps") feed
//! both the segmentation head and the adaptive perceptual loss. The head
//! predicts N semantic classes plus one "fake" class per pixel.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{adaptive_avg_pool, relu, resize_bilinear, resize_nearest, Init, Mode, ParamStore, SpectralConv2d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneDepth {
    Lite,
    Shallow,
    Middle,
    Deep,
}

impl BackboneDepth {
    pub const ALL: [BackboneDepth; 4] = [
        BackboneDepth::Lite,
        BackboneDepth::Shallow,
        BackboneDepth::Middle,
        BackboneDepth::Deep,
    ];

    /// ConvBlock counts as (stem, blocks at stride 1 after the stem,
    /// then blocks after each of the three max-pools).
    fn block_counts(self) -> (usize, [usize; 4]) {
        match self {
            BackboneDepth::Lite => (1, [0, 1, 1, 1]),
            BackboneDepth::Shallow => (1, [1, 2, 2, 1]),
            BackboneDepth::Middle => (1, [1, 2, 4, 1]),
            BackboneDepth::Deep => (3, [2, 3, 4, 1]),
        }
    }
}

impl FromStr for BackboneDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lite" => Ok(Self::Lite),
            "shallow" => Ok(Self::Shallow),
            "middle" => Ok(Self::Middle),
            "deep" => Ok(Self::Deep),
            other => Err(Error::Config(format!("unknown discriminator depth `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Upsample,
    #[serde(rename = "pp")]
    PyramidPooling,
    #[serde(rename = "unet")]
    UNet,
}

impl Default for HeadKind {
    fn default() -> Self {
        HeadKind::PyramidPooling
    }
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Upsample, HeadKind::PyramidPooling, HeadKind::UNet];
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upsample" => Ok(Self::Upsample),
            "pp" => Ok(Self::PyramidPooling),
            "unet" => Ok(Self::UNet),
            other => Err(Error::Config(format!("unknown discriminator head `{other}`"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Upsample => "upsample",
            HeadKind::PyramidPooling => "pp",
            HeadKind::UNet => "unet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    pub depth: BackboneDepth,
    pub head: HeadKind,
    /// 3 for RGB, 4 for the RGB-D ablation.
    pub in_channels: usize,
    /// Widths of the four resolution stages.
    pub widths: [usize; 4],
}

impl DiscriminatorConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            depth: BackboneDepth::Middle,
            head: HeadKind::PyramidPooling,
            in_channels: 3,
            widths: [64, 128, 256, 512],
        }
    }
}

pub const POOL_GRIDS: [usize; 4] = [1, 2, 3, 6];

/// Conv → spectral norm → ReLU.
#[derive(Debug, Clone)]
struct ConvBlock(SpectralConv2d);

impl ConvBlock {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        relu(&self.0.forward(x, mode)?)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Block(ConvBlock),
    MaxPool,
    /// Emit the current activation as a tap.
    Tap,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<Layer>,
    tap_channels: Vec<usize>,
    tap_strides: Vec<usize>,
    in_channels: usize,
}

impl Backbone {
    fn new(init: &mut Init, cfg: &DiscriminatorConfig) -> Result<Self> {
        let (stem, stages) = cfg.depth.block_counts();
        let mut layers = Vec::new();
        let mut tap_channels = Vec::new();
        let mut tap_strides = Vec::new();
        let mut cin = cfg.in_channels;
        let mut idx = 0;
        let mut stride = 1;
        let mut push_block = |layers: &mut Vec<Layer>, cin: &mut usize, cout: usize| -> Result<()> {
            let conv = SpectralConv2d::new(&mut init.sub(&format!("blocks.{idx}")), *cin, cout, 3)?;
            layers.push(Layer::Block(ConvBlock(conv)));
            *cin = cout;
            idx += 1;
            Ok(())
        };
        for _ in 0..stem {
            push_block(&mut layers, &mut cin, cfg.widths[0])?;
        }
        layers.push(Layer::Tap);
        tap_channels.push(cin);
        tap_strides.push(stride);
        for (stage, &count) in stages.iter().enumerate() {
            if stage > 0 {
                layers.push(Layer::MaxPool);
                stride *= 2;
            }
            if count == 0 {
                continue;
            }
            for _ in 0..count {
                push_block(&mut layers, &mut cin, cfg.widths[stage])?;
            }
            layers.push(Layer::Tap);
            tap_channels.push(cin);
            tap_strides.push(stride);
        }
        Ok(Self {
            layers,
            tap_channels,
            tap_strides,
            in_channels: cfg.in_channels,
        })
    }

    /// Human-readable layer listing, e.g. `["ConvBlock-64", "MaxPool2d", …]`.
    pub fn manifest(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Block(b) => Some(format!("ConvBlock-{}", b.0.conv().out_channels())),
                Layer::MaxPool => Some("MaxPool2d".to_string()),
                Layer::Tap => None,
            })
            .collect()
    }

    pub fn tap_channels(&self) -> &[usize] {
        &self.tap_channels
    }

    pub fn tap_strides(&self) -> &[usize] {
        &self.tap_strides
    }

    pub fn spectral_convs(&self) -> impl Iterator<Item = &SpectralConv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(&b.0),
            _ => None,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            contract!("discriminator expects {} input channels, got {c}", self.in_channels);
        }
        if h % 8 != 0 || w % 8 != 0 {
            contract!("discriminator input {h}x{w} must be divisible by 8");
        }
        let mut taps = Vec::with_capacity(self.tap_channels.len());
        let mut x = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Block(b) => x = b.forward(&x, mode)?,
                Layer::MaxPool => x = x.max_pool2d(2)?,
                Layer::Tap => taps.push(x.clone()),
            }
        }
        Ok(taps)
    }
}

#[derive(Debug, Clone)]
enum Head {
    Upsample {
        hidden: SpectralConv2d,
        classifier: SpectralConv2d,
    },
    PyramidPooling {
        branches: Vec<(usize, SpectralConv2d)>,
        fuse: SpectralConv2d,
        classifier: SpectralConv2d,
    },
    UNet {
        /// (source tap index, conv) from the coarsest skip to the finest.
        stages: Vec<(usize, SpectralConv2d)>,
        classifier: SpectralConv2d,
    },
}

impl Head {
    fn new(init: &mut Init, cfg: &DiscriminatorConfig, backbone: &Backbone) -> Result<Self> {
        let out = cfg.num_classes + 1;
        let deep = *backbone.tap_channels.last().expect("at least one tap");
        Ok(match cfg.head {
            HeadKind::Upsample => Head::Upsample {
                hidden: SpectralConv2d::new(&mut init.sub("hidden"), deep, 2 * deep, 1)?,
                classifier: SpectralConv2d::new(&mut init.sub("classifier"), 2 * deep, out, 1)?,
            },
            HeadKind::PyramidPooling => {
                let reduced = (deep / POOL_GRIDS.len()).max(1);
                let branches = POOL_GRIDS
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        SpectralConv2d::new(&mut init.sub(&format!("branches.{i}")), deep, reduced, 1)
                            .map(|c| (g, c))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fused = (deep / 2).max(1);
                let fuse = SpectralConv2d::new(
                    &mut init.sub("fuse"),
                    deep + reduced * POOL_GRIDS.len(),
                    fused,
                    3,
                )?;
                let classifier = SpectralConv2d::new(&mut init.sub("classifier"), fused, out, 1)?;
                Head::PyramidPooling {
                    branches,
                    fuse,
                    classifier,
                }
            }
            HeadKind::UNet => {
                let w = cfg.widths;
                let widths = [3 * w[1] / 2, 3 * w[0] / 2, w[0]];
                let mut stages = Vec::new();
                let mut cin = deep;
                for (i, stride) in [4, 2, 1].into_iter().enumerate() {
                    let tap = backbone
                        .tap_strides
                        .iter()
                        .rposition(|&s| s == stride)
                        .expect("backbone has a tap at every stride");
                    let conv = SpectralConv2d::new(
                        &mut init.sub(&format!("up.{i}")),
                        cin + backbone.tap_channels[tap],
                        widths[i],
                        3,
                    )?;
                    stages.push((tap, conv));
                    cin = widths[i];
                }
                let classifier = SpectralConv2d::new(&mut init.sub("classifier"), cin, out, 1)?;
                Head::UNet { stages, classifier }
            }
        })
    }

    fn forward(&self, taps: &[Tensor], size: (usize, usize), mode: Mode) -> Result<Tensor> {
        let deep = taps.last().expect("at least one tap");
        let (_, _, dh, dw) = deep.dims4()?;
        match self {
            Head::Upsample { hidden, classifier } => {
                let x = relu(&hidden.forward(deep, mode)?)?;
                resize_bilinear(&classifier.forward(&x, mode)?, size.0, size.1)
            }
            Head::PyramidPooling {
                branches,
                fuse,
                classifier,
            } => {
                let mut parts = vec![deep.clone()];
                for (grid, conv) in branches {
                    let pooled = adaptive_avg_pool(deep, *grid, *grid)?;
                    let ctx = relu(&conv.forward(&pooled, mode)?)?;
                    parts.push(resize_bilinear(&ctx, dh, dw)?);
                }
                let x = relu(&fuse.forward(&Tensor::cat(&parts, 1)?, mode)?)?;
                resize_bilinear(&classifier.forward(&x, mode)?, size.0, size.1)
            }
            Head::UNet { stages, classifier } => {
                let mut x = deep.clone();
                for (tap, conv) in stages {
                    let skip = &taps[*tap];
                    let (_, _, h, w) = skip.dims4()?;
                    let up = resize_nearest(&x, h, w)?;
                    x = relu(&conv.forward(&Tensor::cat(&[&up, skip], 1)?, mode)?)?;
                }
                let logits = classifier.forward(&x, mode)?;
                let (_, _, h, w) = logits.dims4()?;
                if (h, w) != size {
                    contract!("u-net head produced {h}x{w}, expected {size:?}");
                }
                Ok(logits)
            }
        }
    }

    fn spectral_convs(&self) -> Vec<&SpectralConv2d> {
        match self {
            Head::Upsample { hidden, classifier } => vec![hidden, classifier],
            Head::PyramidPooling {
                branches,
                fuse,
                classifier,
            } => branches
                .iter()
                .map(|(_, c)| c)
                .chain([fuse, classifier])
                .collect(),
            Head::UNet { stages, classifier } => stages
                .iter()
                .map(|(_, c)| c)
                .chain(std::iter::once(classifier))
                .collect(),
        }
    }
}

/// Per-pixel (N+1)-class logits plus the backbone taps that produced them.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// (B, N+1, H, W), pre-softmax; channel N is "fake".
    pub logits: Tensor,
    /// Shallow → deep.
    pub taps: Vec<Tensor>,
}

#[derive(Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    backbone: Backbone,
    head: Head,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if config.num_classes == 0 || config.widths.iter().any(|&w| w == 0) {
            contract!("discriminator needs positive class count and widths");
        }
        if !(config.in_channels == 3 || config.in_channels == 4) {
            contract!("discriminator input must be RGB (3) or RGB-D (4) channels");
        }
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng, dtype, device);
        let backbone = Backbone::new(&mut init.sub("backbone"), &config)?;
        let head = Head::new(&mut init.sub("head"), &config, &backbone)?;
        Ok(Self {
            config,
            store,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn spectral_convs(&self) -> Vec<&SpectralConv2d> {
        let mut convs: Vec<_> = self.backbone.spectral_convs().collect();
        convs.extend(self.head.spectral_convs());
        convs
    }

    pub fn backbone_forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        self.backbone.forward(x, mode)
    }

    pub fn head_forward(&self, taps: &[Tensor], size: (usize, usize), mode: Mode) -> Result<Tensor> {
        if taps.len() != self.backbone.tap_channels.len() {
            contract!(
                "expected {} taps, got {}",
                self.backbone.tap_channels.len(),
                taps.len()
            );
        }
        self.head.forward(taps, size, mode)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<DiscriminatorOutput> {
        let (_, _, h, w) = x.dims4()?;
        let taps = self.backbone_forward(x, mode)?;
        let logits = self.head_forward(&taps, (h, w), mode)?;
        Ok(DiscriminatorOutput { logits, taps })
    }

    /// Logits only, for callers that do not need the taps.
    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(x, mode)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, softmax_channels, top_singular_value};

    fn small(depth: BackboneDepth, head: HeadKind) -> DiscriminatorConfig {
        DiscriminatorConfig {
            num_classes: 3,
            depth,
            head,
            in_channels: 3,
            widths: [4, 6, 8, 10],
        }
    }

    #[test]
    fn tap_layout_per_depth() -> Result<()> {
        let expect = [
            (BackboneDepth::Lite, vec![1, 2, 4, 8]),
            (BackboneDepth::Shallow, vec![1, 1, 2, 4, 8]),
            (BackboneDepth::Middle, vec![1, 1, 2, 4, 8]),
            (BackboneDepth::Deep, vec![1, 1, 2, 4, 8]),
        ];
        for (depth, strides) in expect {
            let d = Discriminator::new(small(depth, HeadKind::Upsample), 0, DType::F32, &Device::Cpu)?;
            assert_eq!(d.backbone().tap_strides(), strides.as_slice(), "{depth:?}");
        }
        Ok(())
    }

    #[test]
    fn middle_manifest_matches_table() -> Result<()> {
        let d = Discriminator::new(DiscriminatorConfig::new(40), 0, DType::F32, &Device::Cpu)?;
        let m = d.backbone().manifest();
        let expected = [
            "ConvBlock-64", "ConvBlock-64", "MaxPool2d", "ConvBlock-128", "ConvBlock-128",
            "MaxPool2d", "ConvBlock-256", "ConvBlock-256", "ConvBlock-256", "ConvBlock-256",
            "MaxPool2d", "ConvBlock-512",
        ];
        assert_eq!(m, expected);
        Ok(())
    }

    #[test]
    fn upsample_head_constant_tap_gives_constant_logits() -> Result<()> {
        let d = Discriminator::new(small(BackboneDepth::Lite, HeadKind::Upsample), 3, DType::F64, &Device::Cpu)?;
        let taps = d.backbone_forward(&Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu)?, Mode::Eval)?;
        let mut taps = taps;
        let last = taps.len() - 1;
        taps[last] = (taps[last].ones_like()? * 0.7)?;
        let logits = d.head_forward(&taps, (16, 16), Mode::Eval)?;
        let first = logits.narrow(2, 0, 1)?.narrow(3, 0, 1)?;
        let spread = scalar(&logits.broadcast_sub(&first)?.abs()?)?;
        assert!(spread < 1e-12, "spread {spread}");
        Ok(())
    }

    #[test]
    fn zero_input_zero_weights_gives_zero_taps() -> Result<()> {
        let d = Discriminator::new(small(BackboneDepth::Middle, HeadKind::PyramidPooling), 0, DType::F32, &Device::Cpu)?;
        for (_, v) in d.store().params() {
            v.set(&v.zeros_like()?)?;
        }
        let taps = d.backbone_forward(&Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu)?, Mode::Train)?;
        for t in taps {
            assert_eq!(scalar(&t.abs()?)?, 0.0);
        }
        Ok(())
    }

    #[test]
    fn softmax_sums_to_one_and_deterministic() -> Result<()> {
        for head in HeadKind::ALL {
            let d = Discriminator::new(small(BackboneDepth::Middle, head), 1, DType::F32, &Device::Cpu)?;
            let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 24), &Device::Cpu)?;
            let a = d.forward(&x, Mode::Eval)?;
            let b = d.forward(&x, Mode::Eval)?;
            assert_eq!(a.logits.dims(), &[2, 4, 16, 24]);
            assert_eq!(scalar(&(&a.logits - &b.logits)?.abs()?)?, 0.0);
            let sums = softmax_channels(&a.logits)?.sum_keepdim(1)?;
            for s in sums.flatten_all()?.to_vec1::<f32>()? {
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
        Ok(())
    }

    #[test]
    fn rgbd_variant_accepts_four_channels() -> Result<()> {
        let mut cfg = small(BackboneDepth::Lite, HeadKind::PyramidPooling);
        cfg.in_channels = 4;
        let d = Discriminator::new(cfg, 0, DType::F32, &Device::Cpu)?;
        let x = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu)?;
        assert_eq!(d.forward(&x, Mode::Eval)?.logits.dims(), &[1, 4, 16, 16]);
        assert!(d.forward(&Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu)?, Mode::Eval).is_err());
        Ok(())
    }

    #[test]
    fn spectral_norm_bounds_singular_values() -> Result<()> {
        let d = Discriminator::new(small(BackboneDepth::Middle, HeadKind::PyramidPooling), 4, DType::F64, &Device::Cpu)?;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 16, 16), &Device::Cpu)?;
        for _ in 0..3 {
            d.forward(&x, Mode::Train)?;
        }
        for conv in d.spectral_convs() {
            let w = conv.normalized_weight(Mode::Eval)?.flatten_from(1)?;
            let sigma = top_singular_value(&w, 200)?;
            assert!(sigma <= 1.0 + 1e-2, "sigma {sigma}");
        }
        Ok(())
    }
}
