//! Finite-difference checks for every differentiable primitive and for a
//! tiny end-to-end model. Shared by the `gradients` and `acceptance` tests.
#![allow(dead_code)]

use bitcd::backbone::{BackboneConfig, BackboneVariant};
use bitcd::bit::BitConfig;
use bitcd::model::{ChangeDetector, ModelConfig};
use bitcd::nn::{Mode, Module};
use bitcd::tensor::gradcheck::{grad_check, sample_coords, GradCheckOptions, GradCheckReport, GradComparison};
use bitcd::tensor::ops::{self, Conv2dSpec};
use bitcd::tensor::{backward, no_grad, Tensor, Var};
use bitcd::Result;

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for the composed model.
pub const END_TO_END_TOL: f64 = 1e-3;

/// Deterministic values in `[-1, 1)`.
pub fn lcg(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, lcg(shape.iter().product(), seed)).unwrap()
}

/// Values with magnitude at least 0.1, clear of the kink at zero.
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    tensor(shape, seed).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// Distinct values at least 0.01 apart, so a pooling window never ties.
fn spaced(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let keys = lcg(n, seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let mut data = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        data[i] = rank as f64 * 0.01 - 0.5;
    }
    Tensor::new(shape, data).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so that gradients are not all equal.
fn project(out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = Var::constant(tensor(out.shape(), seed ^ 0x9e37));
    Ok(ops::sum(&ops::mul(out, &r)?))
}

fn opts(tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-6,
        tol,
        abs_floor: 1e-6,
        max_coords: Some(48),
    }
}

type Case = (&'static str, Box<dyn Fn(&[Var<f64>]) -> Result<Var<f64>>>, Vec<Tensor<f64>>);

fn case(name: &'static str, f: impl Fn(&[Var<f64>]) -> Result<Var<f64>> + 'static, inputs: Vec<Tensor<f64>>) -> Case {
    (name, Box::new(f), inputs)
}

fn cases() -> Vec<Case> {
    let labels: Vec<u8> = lcg(2 * 9, 40).iter().map(|v| u8::from(*v > 0.0)).collect();
    let labels_ce = labels.clone();
    vec![
        case("add", |v| project(&ops::add(&v[0], &v[1])?, 1), vec![tensor(&[3, 4], 1), tensor(&[3, 4], 2)]),
        case("add broadcast", |v| project(&ops::add(&v[0], &v[1])?, 2), vec![tensor(&[2, 3, 4], 3), tensor(&[4], 4)]),
        case("sub broadcast", |v| project(&ops::sub(&v[0], &v[1])?, 3), vec![tensor(&[2, 3, 4], 5), tensor(&[3, 1], 6)]),
        case("mul", |v| project(&ops::mul(&v[0], &v[1])?, 4), vec![tensor(&[3, 4], 7), tensor(&[3, 4], 8)]),
        case("mul broadcast", |v| project(&ops::mul(&v[0], &v[1])?, 5), vec![tensor(&[2, 3, 4], 9), tensor(&[1, 3, 1], 10)]),
        case("neg", |v| project(&ops::neg(&v[0]), 6), vec![tensor(&[5], 11)]),
        case("scale", |v| project(&ops::scale(&v[0], -1.7), 7), vec![tensor(&[5], 12)]),
        case("add_scalar", |v| project(&ops::add_scalar(&v[0], 0.3), 8), vec![tensor(&[5], 13)]),
        case("abs", |v| project(&ops::abs(&v[0]), 9), vec![off_zero(&[12], 14)]),
        case("relu", |v| project(&ops::relu(&v[0]), 10), vec![off_zero(&[12], 15)]),
        case("gelu", |v| project(&ops::gelu(&v[0]), 11), vec![tensor(&[12], 16).map(|x| 3.0 * x)]),
        case("exp", |v| project(&ops::exp(&v[0]), 12), vec![tensor(&[12], 17)]),
        case("matmul", |v| project(&ops::matmul(&v[0], &v[1])?, 13), vec![tensor(&[3, 4], 18), tensor(&[4, 5], 19)]),
        case("bmm", |v| project(&ops::bmm(&v[0], &v[1])?, 14), vec![tensor(&[2, 3, 4], 20), tensor(&[2, 4, 2], 21)]),
        case(
            "linear",
            |v| project(&ops::linear(&v[0], &v[1], Some(&v[2]))?, 15),
            vec![tensor(&[2, 3, 4], 22), tensor(&[4, 5], 23), tensor(&[5], 24)],
        ),
        case("softmax", |v| project(&ops::softmax(&v[0], 1)?, 16), vec![tensor(&[2, 5, 3], 25)]),
        case(
            "layer_norm",
            |v| project(&ops::layer_norm(&v[0], &v[1], &v[2], 1e-5)?, 17),
            vec![tensor(&[2, 3, 6], 26), tensor(&[6], 27), tensor(&[6], 28)],
        ),
        case(
            "batch_norm2d batch statistics",
            |v| project(&ops::batch_norm2d(&v[0], &v[1], &v[2], None, 1e-5)?.0, 18),
            vec![tensor(&[2, 3, 3, 3], 29), tensor(&[3], 30), tensor(&[3], 31)],
        ),
        case(
            "batch_norm2d running statistics",
            |v| {
                let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.0, 2.0]);
                project(&ops::batch_norm2d(&v[0], &v[1], &v[2], Some((&mean, &var)), 1e-5)?.0, 19)
            },
            vec![tensor(&[2, 3, 3, 3], 32), tensor(&[3], 33), tensor(&[3], 34)],
        ),
        case(
            "conv2d stride 1",
            |v| project(&ops::conv2d(&v[0], &v[1], None, Conv2dSpec::new(1, 1))?, 20),
            vec![tensor(&[2, 2, 5, 5], 35), tensor(&[3, 2, 3, 3], 36)],
        ),
        case(
            "conv2d stride 2 with bias",
            |v| project(&ops::conv2d(&v[0], &v[1], Some(&v[2]), Conv2dSpec::new(2, 3))?, 21),
            vec![tensor(&[1, 2, 8, 7], 37), tensor(&[2, 2, 7, 7], 38), tensor(&[2], 39)],
        ),
        case("max_pool2d", |v| project(&ops::max_pool2d(&v[0], 3, 2, 1)?, 22), vec![spaced(&[2, 2, 6, 6], 40)]),
        case("bilinear up", |v| project(&ops::bilinear_resize(&v[0], 7, 9)?, 23), vec![tensor(&[1, 2, 3, 4], 41)]),
        case("bilinear down", |v| project(&ops::bilinear_resize(&v[0], 3, 2)?, 24), vec![tensor(&[1, 2, 7, 5], 42)]),
        case("reshape", |v| project(&ops::reshape(&v[0], &[4, 3])?, 25), vec![tensor(&[2, 6], 43)]),
        case("permute", |v| project(&ops::permute(&v[0], &[2, 0, 1])?, 26), vec![tensor(&[2, 3, 4], 44)]),
        case(
            "concat",
            |v| project(&ops::concat(&[v[0].clone(), v[1].clone()], 1)?, 27),
            vec![tensor(&[2, 3, 2], 45), tensor(&[2, 1, 2], 46)],
        ),
        case("narrow", |v| project(&ops::narrow(&v[0], 1, 1, 2)?, 28), vec![tensor(&[2, 4, 3], 47)]),
        case("sum_axis", |v| project(&ops::sum_axis(&v[0], 1)?, 29), vec![tensor(&[2, 4, 3], 48)]),
        case("mean", |v| Ok(ops::mean(&ops::mul(&v[0], &v[0])?)), vec![tensor(&[3, 4], 49)]),
        case(
            "multi_head_attention",
            |v| project(&ops::multi_head_attention(&v[0], &v[1], &v[2], 2)?, 30),
            vec![tensor(&[2, 3, 4], 50), tensor(&[2, 5, 4], 51), tensor(&[2, 5, 4], 52)],
        ),
        case(
            "cross_entropy",
            move |v| ops::cross_entropy_from_probs(&v[0], &labels),
            vec![tensor(&[2, 2, 3, 3], 53).map(|p| 0.5 + 0.4 * p)],
        ),
        case(
            "softmax then cross_entropy",
            move |v| ops::cross_entropy_from_probs(&ops::softmax(&v[0], 1)?, &labels_ce),
            vec![tensor(&[2, 2, 3, 3], 54)],
        ),
    ]
}

/// One report per primitive, in a fixed order.
pub fn primitive_reports() -> Vec<(&'static str, GradCheckReport)> {
    cases()
        .into_iter()
        .map(|(name, f, inputs)| {
            let report = grad_check(f, &inputs, opts(PRIMITIVE_TOL)).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, report)
        })
        .collect()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            variant: BackboneVariant::S3,
            out_channels: 8,
            width_multiplier: 0.125,
        },
        bit: BitConfig {
            channels: 8,
            token_length: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            ..BitConfig::default()
        },
        image_size: 16,
    }
}

/// Checks the training loss of the tiny model against central differences
/// in every parameter tensor and in both input images.
pub fn end_to_end_report() -> Result<GradCheckReport> {
    let model = ChangeDetector::<f64>::new(tiny_config(), 11)?;
    let shape = [2, 3, 16, 16];
    let images = [
        tensor(&shape, 60).map(|v| 0.5 + 0.5 * v),
        tensor(&shape, 61).map(|v| 0.5 + 0.5 * v),
    ];
    let labels: Vec<u8> = lcg(2 * 16 * 16, 62).iter().map(|v| u8::from(*v > 0.4)).collect();
    let loss_of = |t1: &Var<f64>, t2: &Var<f64>| -> Result<Var<f64>> {
        let pred = model.forward(t1, t2, Mode::Train)?;
        ops::cross_entropy_from_probs(&pred.probs, &labels)
    };

    let leaves = images.clone().map(Var::leaf);
    backward(&loss_of(&leaves[0], &leaves[1])?)?;
    let params = model.params();
    let grads: Vec<Tensor<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape())))
        .collect();
    let image_grads: Vec<Tensor<f64>> = leaves.iter().map(|l| l.grad().expect("input gradient")).collect();

    let o = GradCheckOptions {
        max_coords: Some(6),
        ..opts(END_TO_END_TOL)
    };
    let _guard = no_grad();
    let constants = || images.clone().map(Var::constant);
    let at = |delta: f64, edit: &dyn Fn(f64)| -> Result<f64> {
        edit(delta);
        let [a, b] = constants();
        let v = loss_of(&a, &b)?.data()[0];
        edit(0.0);
        Ok(v)
    };
    let mut cmp = GradComparison::new(o);
    for (i, p) in params.iter().enumerate() {
        let base = p.value();
        for c in sample_coords(base.len(), o.max_coords) {
            let edit = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[c] += d;
                p.set(t).expect("same shape");
            };
            let numeric = (at(o.eps, &edit)? - at(-o.eps, &edit)?) / (2.0 * o.eps);
            cmp.record(i, c, grads[i].data()[c], numeric);
        }
    }
    for (k, image) in images.iter().enumerate() {
        for c in sample_coords(image.len(), Some(24)) {
            let eval = |d: f64| -> Result<f64> {
                let mut vars = constants();
                let mut t = image.clone();
                t.data_mut()[c] += d;
                vars[k] = Var::constant(t);
                Ok(loss_of(&vars[0], &vars[1])?.data()[0])
            };
            let numeric = (eval(o.eps)? - eval(-o.eps)?) / (2.0 * o.eps);
            cmp.record(params.len() + k, c, image_grads[k].data()[c], numeric);
        }
    }
    Ok(cmp.finish())
}
