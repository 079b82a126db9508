//! Training objectives.
//!
//! Cross-entropy terms are averaged per image over its labeled pixels and
//! then over the batch; VOID pixels contribute nothing. Log-probabilities
//! are floored at `ln(1e-8)`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::dataio::{LabelMap, VOID};
use crate::discriminator::DiscriminatorOutput;
use crate::error::{contract, Error, Result};
use crate::nn::{all_finite, log_softmax_channels};

pub const LOG_FLOOR: f64 = 1e-8;

/// Inverse per-pixel class frequency, averaged over the maps in which each
/// class occurs. Absent classes get weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    alpha: Vec<f64>,
}

impl ClassWeights {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self { alpha }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }
}

pub fn class_weights(labels: &[LabelMap]) -> Result<ClassWeights> {
    let Some(first) = labels.first() else {
        contract!("class weights need a non-empty batch");
    };
    let n = first.num_classes();
    let mut sum = vec![0.0f64; n];
    let mut maps = vec![0usize; n];
    let mut counts = vec![0usize; n];
    for label in labels {
        if label.num_classes() != n {
            contract!("label maps disagree on the number of classes");
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for &c in label.classes() {
            if c != VOID {
                counts[c as usize] += 1;
            }
        }
        let area = (label.height() * label.width()) as f64;
        for c in 0..n {
            if counts[c] > 0 {
                sum[c] += area / counts[c] as f64;
                maps[c] += 1;
            }
        }
    }
    let alpha = sum
        .iter()
        .zip(&maps)
        .map(|(&s, &m)| if m > 0 { s / m as f64 } else { 0.0 })
        .collect();
    Ok(ClassWeights { alpha })
}

fn check_logits(logits: &Tensor, labels: &[LabelMap], extra: usize) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = logits.dims4()?;
    if b != labels.len() {
        contract!("{b} logit maps for {} label maps", labels.len());
    }
    let n = labels[0].num_classes();
    if c != n + extra {
        contract!("logits have {c} channels, expected {}", n + extra);
    }
    if labels.iter().any(|l| (l.height(), l.width()) != (h, w)) {
        contract!("label maps do not match logits size {h}x{w}");
    }
    if !all_finite(logits)? {
        return Err(Error::NonFinite {
            component: "discriminator logits".into(),
        });
    }
    Ok((b, h, w))
}

/// Weighted target tensor for the semantic term: `α_c / n_valid` at the
/// label's class channel, zero elsewhere. Shape (B, channels, H, W).
fn semantic_targets(
    labels: &[LabelMap],
    weights: &ClassWeights,
    channels: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (h, w) = (labels[0].height(), labels[0].width());
    let plane = h * w;
    let mut data = vec![0f64; labels.len() * channels * plane];
    for (b, label) in labels.iter().enumerate() {
        let valid = label.classes().iter().filter(|&&c| c != VOID).count();
        if valid == 0 {
            continue;
        }
        for (i, &c) in label.classes().iter().enumerate() {
            if c != VOID {
                data[(b * channels + c as usize) * plane + i] =
                    weights.alpha[c as usize] / valid as f64;
            }
        }
    }
    Ok(Tensor::from_vec(data, (labels.len(), channels, h, w), device)?.to_dtype(dtype)?)
}

/// Target for the "fake" channel: `1 / n_valid` on labeled pixels.
fn fake_targets(labels: &[LabelMap], channels: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = (labels[0].height(), labels[0].width());
    let plane = h * w;
    let fake = channels - 1;
    let mut data = vec![0f64; labels.len() * channels * plane];
    for (b, label) in labels.iter().enumerate() {
        let valid = label.classes().iter().filter(|&&c| c != VOID).count();
        if valid == 0 {
            continue;
        }
        for (i, &c) in label.classes().iter().enumerate() {
            if c != VOID {
                data[(b * channels + fake) * plane + i] = 1.0 / valid as f64;
            }
        }
    }
    Ok(Tensor::from_vec(data, (labels.len(), channels, h, w), device)?.to_dtype(dtype)?)
}

fn floored_log_probs(logits: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_channels(logits)?.maximum(LOG_FLOOR.ln())?)
}

/// `-(1/B) Σ_b Σ_pixels target · log p`.
fn weighted_nll(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let batch = logits.dims()[0] as f64;
    Ok((floored_log_probs(logits)?.mul(targets)?.sum_all()? * (-1.0 / batch))?)
}

/// Weighted (N+1)-class cross-entropy for the discriminator: real pixels
/// should be classified as their label, generated pixels as "fake".
pub fn d_adversarial_loss_logits(
    real_logits: &Tensor,
    fake_logits: &Tensor,
    labels: &[LabelMap],
    weights: &ClassWeights,
) -> Result<Tensor> {
    check_logits(real_logits, labels, 1)?;
    check_logits(fake_logits, labels, 1)?;
    let channels = real_logits.dims()[1];
    let (dtype, dev) = (real_logits.dtype(), real_logits.device());
    let real = weighted_nll(real_logits, &semantic_targets(labels, weights, channels, dtype, dev)?)?;
    let fake = weighted_nll(fake_logits, &fake_targets(labels, channels, dtype, dev)?)?;
    Ok((real + fake)?)
}

pub fn d_adversarial_loss(
    real: &DiscriminatorOutput,
    labels: &[LabelMap],
    fake: &DiscriminatorOutput,
    weights: &ClassWeights,
) -> Result<Tensor> {
    d_adversarial_loss_logits(&real.logits, &fake.logits, labels, weights)
}

/// Generator counterpart: generated pixels should be classified as the
/// label they were generated from.
pub fn g_adversarial_loss_logits(
    fake_logits: &Tensor,
    labels: &[LabelMap],
    weights: &ClassWeights,
) -> Result<Tensor> {
    check_logits(fake_logits, labels, 1)?;
    let channels = fake_logits.dims()[1];
    let targets = semantic_targets(labels, weights, channels, fake_logits.dtype(), fake_logits.device())?;
    weighted_nll(fake_logits, &targets)
}

pub fn g_adversarial_loss(
    fake: &DiscriminatorOutput,
    labels: &[LabelMap],
    weights: &ClassWeights,
) -> Result<Tensor> {
    g_adversarial_loss_logits(&fake.logits, labels, weights)
}

/// Mean over layers of the mean absolute difference between real and
/// generated taps. Real taps are detached.
pub fn adaptive_perceptual_loss(real_taps: &[Tensor], fake_taps: &[Tensor]) -> Result<Tensor> {
    if real_taps.len() != fake_taps.len() || real_taps.is_empty() {
        contract!(
            "tap lists must be non-empty and equal length, got {} and {}",
            real_taps.len(),
            fake_taps.len()
        );
    }
    let mut total: Option<Tensor> = None;
    for (i, (r, f)) in real_taps.iter().zip(fake_taps).enumerate() {
        if r.dims() != f.dims() {
            contract!("tap {i} shapes differ: {:?} vs {:?}", r.dims(), f.dims());
        }
        let term = (f - r.detach())?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("non-empty") / real_taps.len() as f64)?)
}

#[derive(Debug, Clone)]
pub struct DepthL1 {
    pub loss: Tensor,
    /// Set when no pixel was valid; `loss` is then 0.
    pub no_valid_pixels: bool,
}

/// Mean absolute error over valid ground-truth pixels.
/// `valid` is a 0/1 tensor with the same shape as the depth maps.
pub fn depth_l1_loss(generated: &Tensor, real: &Tensor, valid: &Tensor) -> Result<DepthL1> {
    if generated.dims() != real.dims() || valid.dims() != real.dims() {
        contract!(
            "depth shapes differ: {:?}, {:?}, mask {:?}",
            generated.dims(),
            real.dims(),
            valid.dims()
        );
    }
    let count = valid.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    let masked = (generated - real.detach())?.abs()?.mul(valid)?.sum_all()?;
    if count == 0.0 {
        log::warn!("depth L1 evaluated with no valid pixels");
        return Ok(DepthL1 {
            loss: (masked * 0.0)?,
            no_valid_pixels: true,
        });
    }
    Ok(DepthL1 {
        loss: (masked / count)?,
        no_valid_pixels: false,
    })
}

/// Binary mixing mask aligned to semantic regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    height: usize,
    width: usize,
    mask: Vec<u8>,
    /// Coin per present class; VOID is keyed by [`VOID`].
    assignment: BTreeMap<u8, bool>,
}

impl MixMask {
    pub fn from_assignment(label: &LabelMap, assignment: BTreeMap<u8, bool>) -> Result<Self> {
        let mut mask = Vec::with_capacity(label.classes().len());
        for &c in label.classes() {
            match assignment.get(&c) {
                Some(&bit) => mask.push(bit as u8),
                None => contract!("no mask assignment for class {c}"),
            }
        }
        Ok(Self {
            height: label.height(),
            width: label.width(),
            mask,
            assignment,
        })
    }

    pub fn values(&self) -> &[u8] {
        &self.mask
    }

    pub fn assignment(&self) -> &BTreeMap<u8, bool> {
        &self.assignment
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// (1, 1, H, W) tensor of 0/1.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.mask.iter().map(|&m| m as f32).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Independent fair coin per class present in the map (and one for VOID,
/// if present), painted onto the class regions.
pub fn labelmix_mask<R: Rng>(label: &LabelMap, rng: &mut R) -> Result<MixMask> {
    let mut assignment = BTreeMap::new();
    for c in label.present_classes() {
        assignment.insert(c, rng.random_bool(0.5));
    }
    if label.classes().contains(&VOID) {
        assignment.insert(VOID, rng.random_bool(0.5));
    }
    MixMask::from_assignment(label, assignment)
}

/// Stacks per-sample masks to (B, 1, H, W).
pub fn stack_masks(masks: &[MixMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let parts = masks
        .iter()
        .map(|m| m.to_tensor(dtype, device)?.squeeze(0).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?)
}

/// `M ⊙ x + (1 − M) ⊙ x̂`, with M broadcast over channels.
pub fn labelmix(x: &Tensor, xhat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x.dims() != xhat.dims() {
        contract!("labelmix inputs differ: {:?} vs {:?}", x.dims(), xhat.dims());
    }
    let m = mask.broadcast_as(x.shape())?;
    let inv = (m.ones_like()? - &m)?;
    Ok(((x * &m)? + (xhat * inv)?)?)
}

/// Squared distance between the logits of the mixed image and the mix of
/// the logits, averaged over elements.
pub fn labelmix_consistency_from_logits(
    mixed_logits: &Tensor,
    real_logits: &Tensor,
    fake_logits: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    let target = labelmix(real_logits, fake_logits, mask)?;
    if mixed_logits.dims() != target.dims() {
        contract!("mixed logits {:?} vs {:?}", mixed_logits.dims(), target.dims());
    }
    Ok((mixed_logits - target)?.sqr()?.mean_all()?)
}

pub fn labelmix_consistency_loss<F>(d: F, x: &Tensor, xhat: &Tensor, mask: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mixed = d(&labelmix(x, xhat, mask)?)?;
    labelmix_consistency_from_logits(&mixed, &d(x)?, &d(xhat)?, mask)
}

/// Per-component coefficients; all 1.0 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub ap: f64,
    pub depth: f64,
    pub lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            ap: 1.0,
            depth: 1.0,
            lm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub g_adv: f64,
    pub ap: f64,
    pub depth: f64,
    pub d_adv: f64,
    pub lm: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("g_adv", self.g_adv),
            ("ap", self.ap),
            ("depth", self.depth),
            ("d_adv", self.d_adv),
            ("lm", self.lm),
        ]
    }
}

/// `(L_G, L_D)`; fails naming the first non-finite component.
pub fn total_losses(parts: &LossParts, w: &LossWeights) -> Result<(f64, f64)> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
            });
        }
    }
    let g = w.adv * parts.g_adv + w.ap * parts.ap + w.depth * parts.depth;
    let d = w.adv * parts.d_adv + w.lm * parts.lm;
    Ok((g, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, n: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, n, v.to_vec()).unwrap()
    }

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn class_weight_examples() -> Result<()> {
        assert_eq!(class_weights(&[map(2, 2, 1, &[0; 4])])?.alpha(), &[1.0]);
        assert_eq!(
            class_weights(&[map(2, 2, 2, &[0, 0, 0, 1])])?.alpha(),
            &[4.0 / 3.0, 4.0]
        );
        let a = map(1, 2, 2, &[0, 1]);
        let b = map(2, 2, 3, &[0, 0, 1, 1]);
        assert!(class_weights(&[a.clone(), b]).is_err());
        let b = map(1, 2, 2, &[1, 0]);
        assert_eq!(class_weights(&[a, b])?.alpha(), &[2.0, 2.0]);
        Ok(())
    }

    #[test]
    fn absent_class_has_zero_weight() -> Result<()> {
        assert_eq!(class_weights(&[map(1, 2, 3, &[0, VOID])])?.alpha(), &[2.0, 0.0, 0.0]);
        Ok(())
    }

    #[test]
    fn d_loss_uniform_single_pixel() -> Result<()> {
        let labels = [map(1, 1, 1, &[0])];
        let w = class_weights(&labels)?;
        let zero = t(&[0.0, 0.0], &[1, 2, 1, 1]);
        let v = scalar(&d_adversarial_loss_logits(&zero, &zero, &labels, &w)?)?;
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let g = scalar(&g_adversarial_loss_logits(&zero, &labels, &w)?)?;
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn d_loss_perfect_discriminator_near_zero() -> Result<()> {
        let labels = [map(1, 2, 2, &[0, 1])];
        let w = class_weights(&labels)?;
        let real = t(&[40.0, 0.0, 0.0, 40.0, 0.0, 0.0], &[1, 3, 1, 2]);
        let fake = t(&[0.0, 0.0, 0.0, 0.0, 40.0, 40.0], &[1, 3, 1, 2]);
        let v = scalar(&d_adversarial_loss_logits(&real, &fake, &labels, &w)?)?;
        assert!((0.0..1e-12).contains(&v), "{v}");
        Ok(())
    }

    #[test]
    fn void_pixels_do_not_contribute() -> Result<()> {
        let labels = [map(1, 2, 1, &[0, VOID])];
        let w = class_weights(&labels)?;
        let a = t(&[0.0, 5.0, 0.0, -3.0], &[1, 2, 1, 2]);
        let b = t(&[0.0, -9.0, 0.0, 7.0], &[1, 2, 1, 2]);
        let va = scalar(&d_adversarial_loss_logits(&a, &a, &labels, &w)?)?;
        let vb = scalar(&d_adversarial_loss_logits(&b, &a, &labels, &w)?)?;
        assert!((va - vb).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn non_finite_logits_rejected() {
        let labels = [map(1, 1, 1, &[0])];
        let w = class_weights(&labels).unwrap();
        let bad = t(&[f64::NAN, 0.0], &[1, 2, 1, 1]);
        assert!(matches!(
            d_adversarial_loss_logits(&bad, &bad, &labels, &w),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn perceptual_examples() -> Result<()> {
        let r = vec![t(&[1.0, 2.0], &[1, 2])];
        let f = vec![t(&[0.0, 0.0], &[1, 2])];
        assert!((scalar(&adaptive_perceptual_loss(&r, &f)?)? - 1.5).abs() < 1e-12);
        assert_eq!(scalar(&adaptive_perceptual_loss(&r, &r)?)?, 0.0);
        let r2 = vec![t(&[1.0], &[1]), t(&[2.0, 2.0], &[2])];
        let f2 = vec![t(&[0.0], &[1]), t(&[0.0, 0.0], &[2])];
        assert!((scalar(&adaptive_perceptual_loss(&r2, &f2)?)? - 1.5).abs() < 1e-12);
        assert!(adaptive_perceptual_loss(&r, &f2).is_err());
        Ok(())
    }

    #[test]
    fn depth_l1_examples() -> Result<()> {
        let ones = t(&[1.0, 1.0], &[1, 1, 1, 2]);
        let gt = t(&[0.2, -1.0], &[1, 1, 1, 2]);
        let gen = t(&[0.6, 0.0], &[1, 1, 1, 2]);
        let mask = t(&[1.0, 0.0], &[1, 1, 1, 2]);
        let v = depth_l1_loss(&gen, &gt, &mask)?;
        assert!((scalar(&v.loss)? - 0.4).abs() < 1e-12);
        let off = (&gt + 0.5)?;
        assert!((scalar(&depth_l1_loss(&off, &gt, &ones)?.loss)? - 0.5).abs() < 1e-12);
        let none = depth_l1_loss(&gen, &gt, &(mask * 0.0)?)?;
        assert!(none.no_valid_pixels);
        assert_eq!(scalar(&none.loss)?, 0.0);
        Ok(())
    }

    #[test]
    fn labelmix_mask_single_class_is_uniform() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let m = labelmix_mask(&map(2, 2, 3, &[1; 4]), &mut rng)?;
            assert!(m.values().iter().all(|&v| v == m.values()[0]));
        }
        Ok(())
    }

    #[test]
    fn labelmix_mask_two_classes_has_four_outcomes() -> Result<()> {
        let label = map(2, 2, 2, &[0, 0, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            seen.insert(labelmix_mask(&label, &mut rng)?.values().to_vec());
        }
        let expected: std::collections::BTreeSet<_> = [[0, 0, 0, 0], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 1, 1]]
            .iter()
            .map(|v| v.to_vec())
            .collect();
        assert_eq!(seen, expected);
        Ok(())
    }

    #[test]
    fn labelmix_checkerboard() -> Result<()> {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let xh = t(&[10.0, 20.0, 30.0, 40.0], &[1, 1, 2, 2]);
        let m = t(&[1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let y = labelmix(&x, &xh, &m)?.flatten_all()?.to_vec1::<f64>()?;
        assert_eq!(y, vec![1.0, 20.0, 30.0, 4.0]);
        Ok(())
    }

    #[test]
    fn consistency_global_average_mock() -> Result<()> {
        // D(x) broadcasts the image mean to every pixel.
        let d = |x: &Tensor| -> Result<Tensor> {
            Ok(x.mean_keepdim((2, 3))?.broadcast_as(x.shape())?.contiguous()?)
        };
        let x = t(&[1.0, 0.0], &[1, 1, 1, 2]);
        let xh = t(&[0.0, 0.0], &[1, 1, 1, 2]);
        let m = t(&[1.0, 0.0], &[1, 1, 1, 2]);
        // mix = [1, 0] -> D = [.5, .5]; mix of D = [.5, 0]; mean sq = .125
        let v = scalar(&labelmix_consistency_loss(d, &x, &xh, &m)?)?;
        assert!((v - 0.125).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn totals() -> Result<()> {
        let w = LossWeights::default();
        assert_eq!(total_losses(&LossParts::default(), &w)?, (0.0, 0.0));
        let p = LossParts { g_adv: 1.0, ap: 2.0, depth: 3.0, d_adv: 4.0, lm: 5.0 };
        assert_eq!(total_losses(&p, &w)?, (6.0, 9.0));
        let bad = LossParts { ap: f64::INFINITY, ..p };
        match total_losses(&bad, &w) {
            Err(Error::NonFinite { component }) => assert_eq!(component, "ap"),
            other => panic!("unexpected {other:?}"),
        }
        Ok(())
    }
}
