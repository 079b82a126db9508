#![allow(dead_code)]

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage as Rgb8};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scmis::dataio::{LabelMap, VOID};
use scmis::discriminator::{BackboneDepth, DiscriminatorConfig, HeadKind};
use scmis::generator::GeneratorConfig;
use scmis::trainer::TrainerConfig;

pub const SMALL_SIZE: (usize, usize) = (64, 128);

/// Small widths that keep a 64×128 training step around a second.
pub fn scaled_config(num_classes: usize, seed: u64) -> TrainerConfig {
    let mut cfg = TrainerConfig::new(num_classes);
    cfg.generator = GeneratorConfig {
        stem_channels: 8,
        encoder_channels: 16,
        decoder_channels: vec![32, 32, 32, 16, 16, 16],
        spade_hidden: 16,
        noise_channels: 8,
        image_size: SMALL_SIZE,
        ..GeneratorConfig::new(num_classes)
    };
    cfg.discriminator = DiscriminatorConfig {
        depth: BackboneDepth::Middle,
        head: HeadKind::PyramidPooling,
        widths: [16, 32, 64, 64],
        ..DiscriminatorConfig::new(num_classes)
    };
    cfg.train.batch_size = 2;
    cfg.train.seed = seed;
    cfg.train.ckpt_every = 0;
    cfg
}

/// Label map made of a few axis-aligned blocks, with a VOID strip.
pub fn block_label(h: usize, w: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let cuts: Vec<usize> = (0..3).map(|_| rng.random_range(1..w)).collect();
    let row_cut = rng.random_range(1..h);
    let mut classes = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let band = cuts.iter().filter(|&&c| x >= c).count();
            let c = (band * 2 + usize::from(y >= row_cut)) % num_classes;
            classes[y * w + x] = if y == 0 { VOID } else { c as u8 };
        }
    }
    LabelMap::new(h, w, num_classes, classes).unwrap()
}

/// Writes `n` aligned rgb/depth/label triples whose colours and depths are
/// simple functions of the class, so that they can be fitted quickly.
pub fn write_dataset(root: &Path, n: usize, size: (usize, usize), num_classes: usize, seed: u64) {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for dir in ["rgb", "depth", "label"] {
        std::fs::create_dir_all(root.join(dir)).unwrap();
    }
    for i in 0..n {
        let label = block_label(h, w, num_classes, &mut rng);
        let palette: Vec<[u8; 3]> = (0..num_classes).map(|_| rng.random()).collect();
        let rgb = Rgb8::from_fn(w as u32, h as u32, |x, y| {
            let c = label.get(y as usize, x as usize);
            Rgb(if c == VOID { [0, 0, 0] } else { palette[c as usize] })
        });
        let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let c = label.get(y as usize, x as usize);
            let mm = if x % 17 == 5 { 0 } else { 1000 + 600 * (c as u32 % 8) + 4 * y };
            Luma([mm as u16])
        });
        let gray = GrayImage::from_raw(w as u32, h as u32, label.classes().to_vec()).unwrap();
        let name = format!("{i:04}.png");
        rgb.save(root.join("rgb").join(&name)).unwrap();
        depth.save(root.join("depth").join(&name)).unwrap();
        gray.save(root.join("label").join(&name)).unwrap();
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Random label map over `num_classes` classes with roughly 10% VOID.
pub fn random_label(h: usize, w: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let classes = (0..h * w)
        .map(|_| {
            if rng.random_bool(0.1) {
                VOID
            } else {
                rng.random_range(0..num_classes) as u8
            }
        })
        .collect();
    LabelMap::new(h, w, num_classes, classes).unwrap()
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> candle_core::Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    candle_core::Tensor::from_vec(data, shape, &candle_core::Device::Cpu).unwrap()
}

/// Central-difference check of `f` at `inputs` (f64). Returns the largest,
/// over inputs, of `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn gradient_rel_error<F>(inputs: &[candle_core::Tensor], step: f64, f: F) -> f64
where
    F: Fn(&[candle_core::Tensor]) -> scmis::Result<candle_core::Tensor>,
{
    use candle_core::{Tensor, Var};
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors).unwrap().backward().unwrap();
    let value = |ts: &[Tensor]| f(ts).unwrap().to_scalar::<f64>().unwrap();
    let mut worst = 0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base = inputs[k].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let probe = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let mut ts = inputs.to_vec();
                ts[k] = Tensor::from_vec(v, inputs[k].shape(), inputs[k].device()).unwrap();
                value(&ts)
            };
            numeric.push((probe(step) - probe(-step)) / (2.0 * step));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 0.0 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

/// Tensor whose every element differs from `base` by at least `gap`, so
/// that L1 terms stay differentiable under small perturbations.
pub fn offset_tensor(base: &candle_core::Tensor, gap: f64, rng: &mut ChaCha8Rng) -> candle_core::Tensor {
    let v: Vec<f64> = base
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .into_iter()
        .map(|x| {
            let d = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { x + d } else { x - d }
        })
        .collect();
    candle_core::Tensor::from_vec(v, base.shape(), base.device()).unwrap()
}

/// Relative gradient errors of every differentiable loss on one random
/// instance (batch ≤ 2, at most 4×4 pixels, at most 5 classes).
pub fn loss_gradient_errors(seed: u64, step: f64) -> Vec<(&'static str, f64)> {
    use scmis::losses::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let n = rng.random_range(2..=5);
    let labels: Vec<LabelMap> = (0..b).map(|_| random_label(h, w, n, &mut rng)).collect();
    let weights = class_weights(&labels).unwrap();
    let logits = |rng: &mut ChaCha8Rng| random_tensor(&[b, n + 1, h, w], rng);
    let mut out = Vec::new();

    let inputs = [logits(&mut rng), logits(&mut rng)];
    out.push((
        "d_adv",
        gradient_rel_error(&inputs, step, |t| d_adversarial_loss_logits(&t[0], &t[1], &labels, &weights)),
    ));

    let inputs = [logits(&mut rng)];
    out.push((
        "g_adv",
        gradient_rel_error(&inputs, step, |t| g_adversarial_loss_logits(&t[0], &labels, &weights)),
    ));

    let real_taps: Vec<_> = [(3, h, w), (4, 2, 2), (2, 1, 1)]
        .iter()
        .map(|&(c, th, tw)| random_tensor(&[b, c, th, tw], &mut rng))
        .collect();
    let fake_taps: Vec<_> = real_taps.iter().map(|r| offset_tensor(r, 0.05, &mut rng)).collect();
    out.push((
        "ap",
        gradient_rel_error(&fake_taps, step, |t| adaptive_perceptual_loss(&real_taps, t)),
    ));

    let real = random_tensor(&[b, 1, h, w], &mut rng);
    let generated = offset_tensor(&real, 0.05, &mut rng);
    let mut valid: Vec<f64> = (0..b * h * w).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect();
    valid[0] = 1.0;
    let valid = candle_core::Tensor::from_vec(valid, (b, 1, h, w), &candle_core::Device::Cpu).unwrap();
    out.push((
        "depth",
        gradient_rel_error(&[generated], step, |t| Ok(depth_l1_loss(&t[0], &real, &valid)?.loss)),
    ));

    let masks: Vec<_> = labels.iter().map(|l| labelmix_mask(l, &mut rng).unwrap()).collect();
    let mask = stack_masks(&masks, candle_core::DType::F64, &candle_core::Device::Cpu).unwrap();
    let inputs = [logits(&mut rng), logits(&mut rng), logits(&mut rng)];
    out.push((
        "lm",
        gradient_rel_error(&inputs, step, |t| labelmix_consistency_from_logits(&t[0], &t[1], &t[2], &mask)),
    ));
    out
}
