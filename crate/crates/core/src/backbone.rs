//! Siamese ResNet18 feature extractor producing C-channel maps at 1/4 scale.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Mode, Module, Param, Buffer};
use crate::tensor::ops::{self, Conv2dSpec};
use crate::tensor::{Scalar, Var};

/// How many ResNet18 stages are kept. The stem (7×7 conv and max-pool) is
/// stage one, so `S3` ends after the second residual layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneVariant {
    S3,
    S4,
    S5,
}

impl BackboneVariant {
    /// Number of residual layers (two basic blocks each) after the stem.
    pub fn residual_layers(self) -> usize {
        match self {
            BackboneVariant::S3 => 2,
            BackboneVariant::S4 => 3,
            BackboneVariant::S5 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneVariant::S3 => "s3",
            BackboneVariant::S4 => "s4",
            BackboneVariant::S5 => "s5",
        }
    }
}

impl std::str::FromStr for BackboneVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "s3" => Ok(BackboneVariant::S3),
            "s4" => Ok(BackboneVariant::S4),
            "s5" => Ok(BackboneVariant::S5),
            other => Err(format!("unknown backbone variant `{other}` (expected s3, s4 or s5)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub out_channels: usize,
    /// Scales every internal width; 1 is the standard ResNet18.
    pub width_multiplier: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::S4,
            out_channels: 32,
            width_multiplier: 1.0,
        }
    }
}

impl BackboneConfig {
    /// Channel widths of stem, layer1..layer4.
    pub fn widths(&self) -> [usize; 5] {
        [64, 64, 128, 256, 512].map(|w| ((w as f64 * self.width_multiplier).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::contract("backbone out_channels must be positive"));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::contract("backbone width_multiplier must be positive"));
        }
        Ok(())
    }
}

/// Which image of the pair a map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Temporal {
    First,
    Second,
}

/// A `[B, C, H, W]` map for one temporal image.
#[derive(Clone, Debug)]
pub struct FeatureMap<T: Scalar> {
    pub values: Var<T>,
    pub temporal: Temporal,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Var<T>, temporal: Temporal) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(Error::contract(format!("feature map must be [B,C,H,W], got {:?}", values.shape())));
        }
        Ok(Self { values, temporal })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// `[B, HW, C]` view (one row per pixel).
    pub fn flatten(&self) -> Result<Var<T>> {
        let (b, c, h, w) = self.dims();
        let x = ops::reshape(&self.values, &[b, c, h * w])?;
        ops::permute(&x, &[0, 2, 1])
    }

    /// Inverse of [`FeatureMap::flatten`].
    pub fn unflatten(seq: &Var<T>, h: usize, w: usize, temporal: Temporal) -> Result<Self> {
        let s = seq.shape();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::dim("unflatten", s, &[h * w]));
        }
        let (b, c) = (s[0], s[2]);
        let x = ops::permute(seq, &[0, 2, 1])?;
        Self::new(ops::reshape(&x, &[b, c, h, w])?, temporal)
    }
}

/// Two 3×3 conv-BN units with an identity (or 1×1 projected) shortcut.
#[derive(Debug)]
pub struct BasicBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new<R: Rng + ?Sized>(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&join(prefix, "downsample.0"), cin, cout, 1, Conv2dSpec::new(stride, 0), false, rng),
                BatchNorm2d::new(&join(prefix, "downsample.1"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(&join(prefix, "conv1"), cin, cout, 3, Conv2dSpec::new(stride, 1), false, rng),
            bn1: BatchNorm2d::new(&join(prefix, "bn1"), cout),
            conv2: Conv2d::new(&join(prefix, "conv2"), cout, cout, 3, Conv2dSpec::new(1, 1), false, rng),
            bn2: BatchNorm2d::new(&join(prefix, "bn2"), cout),
            downsample,
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let y = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add_same(&y, &shortcut)?))
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        if let Some((c, b)) = &self.downsample {
            p.extend(c.params());
            p.extend(b.params());
        }
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.bn1.buffers();
        b.extend(self.bn2.buffers());
        if let Some((_, bn)) = &self.downsample {
            b.extend(bn.buffers());
        }
        b
    }
}

#[derive(Debug)]
pub struct Backbone<T: Scalar> {
    pub config: BackboneConfig,
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    /// Residual layers in order, two blocks each.
    pub layers: Vec<[BasicBlock<T>; 2]>,
    /// 1×1 convolution to `out_channels`.
    pub projection: Conv2d<T>,
}

/// Stride of the first block of each residual layer. After layer2 the map
/// sits at 1/8; the remaining layers keep that resolution.
const LAYER_STRIDES: [usize; 4] = [1, 2, 1, 1];

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.widths();
        let stem = Conv2d::new("backbone.conv1", 3, w[0], 7, Conv2dSpec::new(2, 3), false, rng);
        let stem_bn = BatchNorm2d::new("backbone.bn1", w[0]);
        let mut layers = Vec::new();
        for i in 0..config.variant.residual_layers() {
            let prefix = format!("backbone.layer{}", i + 1);
            let (cin, cout) = (w[i], w[i + 1]);
            layers.push([
                BasicBlock::new(&join(&prefix, "0"), cin, cout, LAYER_STRIDES[i], rng),
                BasicBlock::new(&join(&prefix, "1"), cout, cout, 1, rng),
            ]);
        }
        let last = w[config.variant.residual_layers()];
        let projection = Conv2d::new("backbone.proj", last, config.out_channels, 1, Conv2dSpec::new(1, 0), true, rng);
        Ok(Self {
            config,
            stem,
            stem_bn,
            layers,
            projection,
        })
    }

    /// Channels of the last residual layer (input of the projection).
    pub fn trunk_channels(&self) -> usize {
        self.config.widths()[self.config.variant.residual_layers()]
    }

    /// Features of one image `[B,3,H,W]`, H and W divisible by 4.
    pub fn forward(&self, image: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::contract(format!("backbone expects [B,3,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::contract(format!("image extents {h}×{w} must be positive multiples of 4")));
        }
        let mut x = ops::relu(&self.stem_bn.forward(&self.stem.forward(image)?, mode)?);
        x = ops::max_pool2d(&x, 3, 2, 1)?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x, mode)?;
            }
        }
        let x = self.projection.forward(&x)?;
        ops::bilinear_resize(&x, h / 4, w / 4)
    }

    /// Applies the same weights to both images of a pair.
    pub fn extract_features(&self, t1: &Var<T>, t2: &Var<T>, mode: Mode) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        if t1.shape() != t2.shape() {
            return Err(Error::contract(format!(
                "bitemporal images differ in shape: {:?} vs {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
        Ok((
            FeatureMap::new(self.forward(t1, mode)?, Temporal::First)?,
            FeatureMap::new(self.forward(t2, mode)?, Temporal::Second)?,
        ))
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stem.params();
        p.extend(self.stem_bn.params());
        for layer in &self.layers {
            for b in layer {
                p.extend(b.params());
            }
        }
        p.extend(self.projection.params());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.stem_bn.buffers();
        for layer in &self.layers {
            for blk in layer {
                b.extend(blk.buffers());
            }
        }
        b
    }
}
