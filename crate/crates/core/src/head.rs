//! Prediction head: upsample, absolute feature difference, two-layer conv
//! classifier, per-pixel softmax and argmax.

use rand::Rng;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Buffer, Conv2d, Mode, Module, Param};
use crate::tensor::ops::{self, Conv2dSpec};
use crate::tensor::{Scalar, Tensor, Var};

/// Hidden width of the classifier.
pub const CLASSIFIER_WIDTH: usize = 32;

/// Bilinear ×4 back to image resolution.
pub fn upsample_features<T: Scalar>(x: &FeatureMap<T>) -> Result<Var<T>> {
    let (_, _, h, w) = x.dims();
    ops::bilinear_resize(&x.values, 4 * h, 4 * w)
}

/// `|a − b|`.
pub fn feature_difference<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "feature difference of mismatched shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(ops::abs(&ops::sub(a, b)?))
}

/// conv3×3 → BN → ReLU → conv3×3 → softmax over the two classes.
#[derive(Debug)]
pub struct Classifier<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new("head.conv1", channels, CLASSIFIER_WIDTH, 3, Conv2dSpec::new(1, 1), false, rng),
            bn: BatchNorm2d::new("head.bn", CLASSIFIER_WIDTH),
            conv2: Conv2d::new("head.conv2", CLASSIFIER_WIDTH, 2, 3, Conv2dSpec::new(1, 1), true, rng),
        }
    }

    pub fn logits(&self, d: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let y = ops::relu(&self.bn.forward(&self.conv1.forward(d)?, mode)?);
        self.conv2.forward(&y)
    }

    /// Change probabilities `[B, 2, H, W]`.
    pub fn forward(&self, d: &Var<T>, mode: Mode) -> Result<Var<T>> {
        ops::softmax(&self.logits(d, mode)?, 1)
    }
}

impl<T: Scalar> Module<T> for Classifier<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.bn.params());
        p.extend(self.conv2.params());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.bn.buffers()
    }
}

/// Binary change mask, `[B, H, W]` row-major, 1 = change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMask {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl ChangeMask {
    /// One `[H, W]` plane.
    pub fn plane(&self, b: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.values[b * n..(b + 1) * n]
    }
}

/// Per-pixel argmax of `[B, 2, H, W]` probabilities; ties go to no-change.
pub fn predict_mask<T: Scalar>(probs: &Tensor<T>) -> Result<ChangeMask> {
    let s = probs.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::contract(format!("probability map must be [B,2,H,W], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let p = probs.data();
    let mut values = Vec::with_capacity(b * hw);
    for n in 0..b {
        let (no, yes) = (&p[(2 * n) * hw..(2 * n + 1) * hw], &p[(2 * n + 1) * hw..(2 * n + 2) * hw]);
        values.extend(no.iter().zip(yes).map(|(a, c)| u8::from(c > a)));
    }
    Ok(ChangeMask {
        batch: b,
        height: h,
        width: w,
        values,
    })
}
