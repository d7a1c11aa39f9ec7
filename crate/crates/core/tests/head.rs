mod common;

use bitcd::backbone::{BackboneConfig, BackboneVariant, FeatureMap, Temporal};
use bitcd::bit::BitConfig;
use bitcd::head::{feature_difference, predict_mask, upsample_features, Classifier, CLASSIFIER_WIDTH};
use bitcd::model::{ChangeDetector, ModelConfig};
use bitcd::nn::{Mode, Module};
use bitcd::tensor::{no_grad, Tensor, Var};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(pe_in_encoder: bool) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            variant: BackboneVariant::S4,
            out_channels: 8,
            width_multiplier: 0.125,
        },
        bit: BitConfig {
            channels: 8,
            token_length: 2,
            decoder_depth: 1,
            heads: 2,
            head_dim: 4,
            pe_in_encoder,
            ..BitConfig::default()
        },
        image_size: 16,
    }
}

fn image(seed: u64) -> Var<f64> {
    to_var(&[1, 3, 16, 16], &values(768, seed))
}

#[test]
fn constant_map_upsamples_to_a_constant() {
    let x = FeatureMap::new(to_var(&[1, 2, 3, 5], &[0.75; 30]), Temporal::First).unwrap();
    let y = upsample_features(&x).unwrap();
    assert_eq!(y.shape(), &[1, 2, 12, 20]);
    assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
}

#[test]
fn sixty_four_upsamples_to_256() {
    let x = FeatureMap::new(Var::constant(Tensor::<f32>::zeros(&[2, 32, 64, 64])), Temporal::First).unwrap();
    assert_eq!(upsample_features(&x).unwrap().shape(), &[2, 32, 256, 256]);
}

#[test]
fn two_by_two_upsample_matches_coordinate_formula() {
    let v = [1.0, 2.0, 3.0, 5.0];
    let x = FeatureMap::new(to_var(&[1, 1, 2, 2], &v), Temporal::First).unwrap();
    let y = upsample_features(&x).unwrap();
    // Output pixel centers map to source coordinate (i + 0.5)/4 − 0.5,
    // clamped to the two source samples.
    let coord = |i: usize| ((i as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, 1.0);
    let mut expected = Vec::new();
    for r in 0..8 {
        for c in 0..8 {
            let (fy, fx) = (coord(r), coord(c));
            expected.push((1.0 - fy) * ((1.0 - fx) * v[0] + fx * v[1]) + fy * ((1.0 - fx) * v[2] + fx * v[3]));
        }
    }
    assert_close(y.data(), &expected, 1e-10);
}

#[test]
fn difference_is_zero_symmetric_and_elementwise() {
    let a = to_var(&[1, 1, 2, 2], &[0.5, -1.0, 2.0, 0.0]);
    let b = to_var(&[1, 1, 2, 2], &[1.5, -3.0, 2.0, -0.25]);
    assert!(feature_difference(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
    let ab = feature_difference(&a, &b).unwrap();
    let ba = feature_difference(&b, &a).unwrap();
    assert_eq!(ab.data(), ba.data());
    assert_close(ab.data(), &[1.0, 2.0, 0.0, 0.25], 1e-12);
    let c = to_var(&[1, 1, 1, 4], &[0.0; 4]);
    assert!(matches!(feature_difference(&a, &c), Err(bitcd::Error::Contract(_))));
}

#[test]
fn classifier_outputs_distributions() {
    let head = Classifier::<f64>::new(4, &mut ChaCha8Rng::seed_from_u64(1));
    let d = to_var(&[2, 4, 5, 6], &values(240, 2));
    for mode in [Mode::Train, Mode::Eval] {
        let p = head.forward(&d, mode).unwrap();
        assert_eq!(p.shape(), &[2, 2, 5, 6]);
        let data = p.data();
        for b in 0..2 {
            for i in 0..30 {
                let (p0, p1) = (data[b * 60 + i], data[b * 60 + 30 + i]);
                assert!((p0 + p1 - 1.0).abs() < 1e-6 && (0.0..=1.0).contains(&p0));
            }
        }
    }
}

#[test]
fn zero_input_gives_even_odds() {
    let head = Classifier::<f64>::new(4, &mut ChaCha8Rng::seed_from_u64(3));
    let p = head.forward(&to_var(&[1, 4, 3, 3], &[0.0; 36]), Mode::Eval).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn classifier_matches_layer_by_layer_reference() {
    let head = Classifier::<f64>::new(3, &mut ChaCha8Rng::seed_from_u64(4));
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for p in head.params() {
        p.set(Tensor::randn(&p.shape(), 0.3, &mut r)).unwrap();
    }
    let mean: Vec<f64> = values(CLASSIFIER_WIDTH, 6).iter().map(|v| 0.1 * v).collect();
    let var: Vec<f64> = values(CLASSIFIER_WIDTH, 7).iter().map(|v| 1.0 + 0.5 * v).collect();
    head.bn.running_mean.set(Tensor::new(&[CLASSIFIER_WIDTH], mean.clone()).unwrap()).unwrap();
    head.bn.running_var.set(Tensor::new(&[CLASSIFIER_WIDTH], var.clone()).unwrap()).unwrap();
    let (h, w) = (4, 3);
    let x = values(3 * h * w, 8);
    let p = head.forward(&to_var(&[1, 3, h, w], &x), Mode::Eval).unwrap();

    let k1 = head.conv1.weight.value();
    let y = conv2d_ref(&x, (3, h, w), k1.data(), CLASSIFIER_WIDTH, 3, 1, None);
    let (g, b) = (head.bn.gamma.value(), head.bn.beta.value());
    let hw = h * w;
    let y: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / hw;
            ((v - mean[c]) / (var[c] + 1e-5).sqrt() * g.data()[c] + b.data()[c]).max(0.0)
        })
        .collect();
    let k2 = head.conv2.weight.value();
    let bias2 = head.conv2.bias.as_ref().unwrap().value();
    let logits = conv2d_ref(&y, (CLASSIFIER_WIDTH, h, w), k2.data(), 2, 3, 1, Some(bias2.data()));
    let mut expected = vec![0.0; 2 * hw];
    for i in 0..hw {
        let s = softmax(&[logits[i], logits[hw + i]]);
        expected[i] = s[0];
        expected[hw + i] = s[1];
    }
    assert_close(p.data(), &expected, 1e-8);
}

#[test]
fn mask_rule_and_ties() {
    let p = Tensor::new(&[1, 2, 1, 3], vec![0.9, 0.1, 0.5, 0.1, 0.9, 0.5]).unwrap();
    assert_eq!(predict_mask(&p).unwrap().values, vec![0, 1, 0]);
}

#[test]
fn mask_matches_comparison_reference() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let raw: Tensor<f64> = Tensor::rand_uniform(&[3, 1, 4, 5], 0.0, 1.0, &mut r);
    let probs: Vec<f64> = raw.data().iter().flat_map(|&a| [a, 1.0 - a]).collect();
    // Interleaved pairs → [B, 2, H, W] planes.
    let mut planar = vec![0.0; probs.len()];
    for b in 0..3 {
        for i in 0..20 {
            planar[b * 40 + i] = probs[2 * (b * 20 + i)];
            planar[b * 40 + 20 + i] = probs[2 * (b * 20 + i) + 1];
        }
    }
    let mask = predict_mask(&Tensor::new(&[3, 2, 4, 5], planar).unwrap()).unwrap();
    let expected: Vec<u8> = raw.data().iter().map(|&a| u8::from(1.0 - a > a)).collect();
    assert_eq!(mask.values, expected);
    assert_eq!((mask.batch, mask.height, mask.width), (3, 4, 5));
}

#[test]
fn identical_images_without_embedding_predict_one_class() {
    for mode in [Mode::Eval, Mode::Train] {
        let m = ChangeDetector::<f64>::new(tiny_config(false), 1).unwrap();
        let x = image(10);
        let pred = m.forward(&x, &x.clone(), mode).unwrap();
        assert!(pred.difference.data().iter().all(|&v| v == 0.0));
        let mask = pred.mask().unwrap();
        assert!(mask.values.iter().all(|&v| v == mask.values[0]));
        let p = pred.probs.data();
        assert!(p[..256].iter().all(|&v| (v - p[0]).abs() < 1e-12));
    }
}

#[test]
fn swapping_the_dates_leaves_probabilities_unchanged_without_embedding() {
    let m = ChangeDetector::<f64>::new(tiny_config(false), 2).unwrap();
    let (a, b) = (image(11), image(12));
    let p = m.forward(&a, &b, Mode::Eval).unwrap().probs;
    let q = m.forward(&b, &a, Mode::Eval).unwrap().probs;
    assert_close(p.data(), q.data(), 1e-12);
}

#[test]
fn full_size_output_shapes() {
    let _g = no_grad();
    let m = ChangeDetector::<f32>::new(ModelConfig::default(), 0).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let t1 = Var::constant(Tensor::randn(&[1, 3, 256, 256], 1.0, &mut r));
    let t2 = Var::constant(Tensor::randn(&[1, 3, 256, 256], 1.0, &mut r));
    let (p, mask) = m.predict(&t1, &t2).unwrap();
    assert_eq!(p.shape(), &[1, 2, 256, 256]);
    assert_eq!((mask.batch, mask.height, mask.width), (1, 256, 256));
    assert!(mask.values.iter().all(|&v| v <= 1));
}

#[test]
fn model_golden_checksum() {
    let m = ChangeDetector::<f64>::new(tiny_config(true), 2024).unwrap();
    let p = m.forward(&image(14), &image(15), Mode::Eval).unwrap().probs;
    let d = p.data();
    let sums = [d[256..].iter().sum::<f64>(), d.iter().enumerate().map(|(i, v)| v * ((i % 3) as f64 - 1.0)).sum()];
    println!("golden {sums:?}");
    for (a, e) in sums.iter().zip(GOLDEN) {
        assert!((a - e).abs() <= 1e-10 * e.abs().max(1.0), "{a} vs golden {e}");
    }
}

const GOLDEN: [f64; 2] = [239.99183710876977, -0.4386559270343625];
