//! The full change detector: backbone, transformer, prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::bit::{Bit, BitConfig, BitOutput};
use crate::error::{Error, Result};
use crate::head::{feature_difference, predict_mask, upsample_features, ChangeMask, Classifier};
use crate::nn::{Buffer, Mode, Module, Param};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub bit: BitConfig,
    /// Square training/inference extent; sizes the embeddings that depend
    /// on the number of feature pixels.
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            bit: BitConfig::default(),
            image_size: 256,
        }
    }
}

impl ModelConfig {
    /// The CNN-only baseline: every transformer stage switched off.
    pub fn base(backbone: BackboneConfig) -> Self {
        let bit = BitConfig {
            channels: backbone.out_channels,
            use_tokenizer: false,
            use_encoder: false,
            use_decoder: false,
            ..BitConfig::default()
        };
        Self {
            backbone,
            bit,
            image_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.bit.validate()?;
        if self.backbone.out_channels != self.bit.channels {
            return Err(Error::config(
                "model.channels",
                format!(
                    "backbone produces {} channels but the transformer expects {}",
                    self.backbone.out_channels, self.bit.channels
                ),
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(Error::config("model.image_size", "must be a positive multiple of 4"));
        }
        Ok(())
    }

    pub fn feature_pixels(&self) -> usize {
        (self.image_size / 4).pow(2)
    }
}

/// Intermediate and final results of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T: Scalar> {
    pub features: (FeatureMap<T>, FeatureMap<T>),
    pub transformer: BitOutput<T>,
    /// Feature difference image at input resolution.
    pub difference: Var<T>,
    /// Change probabilities `[B, 2, H, W]`.
    pub probs: Var<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn mask(&self) -> Result<ChangeMask> {
        predict_mask(self.probs.value())
    }
}

#[derive(Debug)]
pub struct ChangeDetector<T: Scalar> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub transformer: Bit<T>,
    pub classifier: Classifier<T>,
}

impl<T: Scalar> ChangeDetector<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
        let transformer = Bit::new(config.bit.clone(), config.feature_pixels(), &mut rng)?;
        let classifier = Classifier::new(config.backbone.out_channels, &mut rng);
        Ok(Self {
            config,
            backbone,
            transformer,
            classifier,
        })
    }

    /// Images `[B, 3, H, W]` of the two dates.
    pub fn forward(&self, t1: &Var<T>, t2: &Var<T>, mode: Mode) -> Result<Prediction<T>> {
        let features = self.backbone.extract_features(t1, t2, mode)?;
        let transformer = self.transformer.forward(&features.0, &features.1)?;
        let (r1, r2) = &transformer.refined;
        let difference = feature_difference(&upsample_features(r1)?, &upsample_features(r2)?)?;
        let probs = self.classifier.forward(&difference, mode)?;
        Ok(Prediction {
            features,
            transformer,
            difference,
            probs,
        })
    }

    /// Eval-mode probabilities and argmax mask.
    pub fn predict(&self, t1: &Var<T>, t2: &Var<T>) -> Result<(Var<T>, ChangeMask)> {
        let p = self.forward(t1, t2, Mode::Eval)?;
        let mask = p.mask()?;
        Ok((p.probs, mask))
    }
}

impl<T: Scalar> Module<T> for ChangeDetector<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.backbone.params();
        p.extend(self.transformer.params());
        p.extend(self.classifier.params());
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.backbone.buffers();
        b.extend(self.classifier.buffers());
        b
    }
}
