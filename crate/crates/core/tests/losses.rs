mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scmis::dataio::{LabelMap, VOID};
use scmis::losses::*;

use common::{loss_gradient_errors, random_label, random_tensor};

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..5 {
        for (name, err) in loss_gradient_errors(seed, 1e-3) {
            assert!(err < 1e-4, "{name} (instance {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn logit_floor_does_not_break_gradients_of_confident_pixels() {
    // Strongly separated logits push most probabilities far from the floor.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels = vec![random_label(3, 3, 3, &mut rng)];
    let w = class_weights(&labels).unwrap();
    let t = (random_tensor(&[1, 4, 3, 3], &mut rng) * 3.0).unwrap();
    let err = common::gradient_rel_error(&[t], 1e-3, |t| g_adversarial_loss_logits(&t[0], &labels, &w));
    assert!(err < 1e-4, "{err:e}");
}

fn label_strategy() -> impl Strategy<Value = LabelMap> {
    (1usize..5, 1usize..5, 1usize..6).prop_flat_map(|(h, w, n)| {
        prop::collection::vec(prop_oneof![9 => 0..n as u8, 1 => Just(VOID)], h * w)
            .prop_map(move |classes| LabelMap::new(h, w, n, classes).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_weight_times_count_is_area(label in label_strategy()) {
        let w = class_weights(std::slice::from_ref(&label)).unwrap();
        let area = (label.height() * label.width()) as f64;
        for c in 0..label.num_classes() {
            let count = label.classes().iter().filter(|&&v| v == c as u8).count();
            if count == 0 {
                prop_assert_eq!(w.alpha()[c], 0.0);
            } else {
                prop_assert!((w.alpha()[c] * count as f64 - area).abs() < 1e-9 * area);
            }
        }
    }

    #[test]
    fn adversarial_losses_are_non_negative(label in label_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = vec![label];
        let (h, w, n) = (labels[0].height(), labels[0].width(), labels[0].num_classes());
        let weights = class_weights(&labels).unwrap();
        let real = random_tensor(&[1, n + 1, h, w], &mut rng);
        let fake = random_tensor(&[1, n + 1, h, w], &mut rng);
        let d = d_adversarial_loss_logits(&real, &fake, &labels, &weights).unwrap().to_scalar::<f64>().unwrap();
        let g = g_adversarial_loss_logits(&fake, &labels, &weights).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(d >= 0.0 && d.is_finite());
        prop_assert!(g >= 0.0 && g.is_finite());
    }

    #[test]
    fn perceptual_loss_is_symmetric_in_value(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = vec![random_tensor(&[2, 3, 4, 4], &mut rng), random_tensor(&[2, 5, 2, 2], &mut rng)];
        let b = vec![random_tensor(&[2, 3, 4, 4], &mut rng), random_tensor(&[2, 5, 2, 2], &mut rng)];
        let ab = adaptive_perceptual_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        let ba = adaptive_perceptual_loss(&b, &a).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        let aa = adaptive_perceptual_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap();
        prop_assert_eq!(aa, 0.0);
    }

    #[test]
    fn depth_l1_ignores_invalid_pixels(seed in any::<u64>(), noise in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = random_tensor(&[1, 1, 3, 3], &mut rng);
        let generated = random_tensor(&[1, 1, 3, 3], &mut rng);
        let mut mask = vec![1.0f64; 9];
        mask[4] = 0.0;
        let valid = Tensor::from_vec(mask, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let mut bumped = generated.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        bumped[4] += noise;
        let bumped = Tensor::from_vec(bumped, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let a = depth_l1_loss(&generated, &real, &valid).unwrap().loss.to_scalar::<f64>().unwrap();
        let b = depth_l1_loss(&bumped, &real, &valid).unwrap().loss.to_scalar::<f64>().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn labelmix_mask_is_constant_on_each_class(label in label_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = labelmix_mask(&label, &mut rng).unwrap();
        let mut seen: BTreeMap<u8, u8> = BTreeMap::new();
        for (&c, &m) in label.classes().iter().zip(mask.values()) {
            prop_assert!(m <= 1);
            prop_assert_eq!(*seen.entry(c).or_insert(m), m);
        }
    }

    #[test]
    fn labelmix_with_full_masks_selects_one_input(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[1, 3, 2, 3], &mut rng);
        let xhat = random_tensor(&[1, 3, 2, 3], &mut rng);
        let ones = Tensor::ones((1, 1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let diff = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        prop_assert_eq!(diff(&labelmix(&x, &xhat, &ones).unwrap(), &x), 0.0);
        prop_assert_eq!(diff(&labelmix(&x, &xhat, &zeros).unwrap(), &xhat), 0.0);
    }
}
