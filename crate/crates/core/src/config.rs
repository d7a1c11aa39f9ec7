//! Run configuration: `key = value` lines with dotted section keys.
//!
//! Sources are applied in order file, then the `BITCD_SEED` environment
//! variable, then `--section.key value` flags; the last writer wins.

use std::path::PathBuf;

use crate::backbone::BackboneVariant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "BITCD_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub test_split: String,
    pub patch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            test_split: "test".into(),
            patch_size: 256,
        }
    }
}

/// Sizes of the generated synthetic splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
}

impl Default for SynthSplits {
    fn default() -> Self {
        Self {
            train: 400,
            val: 100,
            test: 100,
            size: 64,
        }
    }
}

/// Which sample the visualizers render and how many channels they dump.
#[derive(Clone, Debug, PartialEq)]
pub struct VisConfig {
    pub split: String,
    pub sample: usize,
    pub channels: usize,
}

impl Default for VisConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            sample: 0,
            channels: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Also holds the run seed, which seeds model initialization too.
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthSplits,
    pub vis: VisConfig,
    pub output_dir: PathBuf,
    /// Checkpoint directory read by `eval`, `infer` and the visualizers.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthSplits::default(),
            vis: VisConfig::default(),
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("expected {what}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Every key in render order.
    pub const KEYS: [&'static str; 35] = [
        "seed",
        "output_dir",
        "checkpoint",
        "model.backbone",
        "model.channels",
        "model.width_multiplier",
        "model.image_size",
        "model.token_length",
        "model.encoder_depth",
        "model.decoder_depth",
        "model.heads",
        "model.head_dim",
        "model.use_tokenizer",
        "model.use_encoder",
        "model.use_decoder",
        "model.pe_in_encoder",
        "model.pe_in_decoder",
        "train.lr",
        "train.momentum",
        "train.weight_decay",
        "train.epochs",
        "train.batch_size",
        "train.augment",
        "data.root",
        "data.train_split",
        "data.val_split",
        "data.test_split",
        "data.patch_size",
        "synth.train",
        "synth.val",
        "synth.test",
        "synth.size",
        "vis.split",
        "vis.sample",
        "vis.channels",
    ];

    /// Assigns one key without validating cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| parse_num::<usize>(key, v, "a non-negative integer");
        let float = |v: &str| parse_num::<f64>(key, v, "a number");
        let bit = &mut self.model.bit;
        match key {
            "seed" => self.train.seed = parse_num(key, value, "a non-negative integer")?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "model.backbone" => {
                self.model.backbone.variant = value.parse::<BackboneVariant>().map_err(|e| Error::config(key, e))?
            }
            "model.channels" => {
                let c = int(value)?;
                self.model.backbone.out_channels = c;
                bit.channels = c;
            }
            "model.width_multiplier" => self.model.backbone.width_multiplier = float(value)?,
            "model.image_size" => self.model.image_size = int(value)?,
            "model.token_length" => bit.token_length = int(value)?,
            "model.encoder_depth" => bit.encoder_depth = int(value)?,
            "model.decoder_depth" => bit.decoder_depth = int(value)?,
            "model.heads" => bit.heads = int(value)?,
            "model.head_dim" => bit.head_dim = int(value)?,
            "model.use_tokenizer" => bit.use_tokenizer = parse_bool(key, value)?,
            "model.use_encoder" => bit.use_encoder = parse_bool(key, value)?,
            "model.use_decoder" => bit.use_decoder = parse_bool(key, value)?,
            "model.pe_in_encoder" => bit.pe_in_encoder = parse_bool(key, value)?,
            "model.pe_in_decoder" => bit.pe_in_decoder = parse_bool(key, value)?,
            "train.lr" => self.train.lr = float(value)?,
            "train.momentum" => self.train.momentum = float(value)?,
            "train.weight_decay" => self.train.weight_decay = float(value)?,
            "train.epochs" => self.train.epochs = int(value)?,
            "train.batch_size" => self.train.batch_size = int(value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "data.root" => self.data.root = PathBuf::from(value),
            "data.train_split" => self.data.train_split = value.to_string(),
            "data.val_split" => self.data.val_split = value.to_string(),
            "data.test_split" => self.data.test_split = value.to_string(),
            "data.patch_size" => self.data.patch_size = int(value)?,
            "synth.train" => self.synth.train = int(value)?,
            "synth.val" => self.synth.val = int(value)?,
            "synth.test" => self.synth.test = int(value)?,
            "synth.size" => self.synth.size = int(value)?,
            "vis.split" => self.vis.split = value.to_string(),
            "vis.sample" => self.vis.sample = int(value)?,
            "vis.channels" => self.vis.channels = int(value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let bit = &self.model.bit;
        match key {
            "seed" => self.train.seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "checkpoint" => self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "model.backbone" => self.model.backbone.variant.name().to_string(),
            "model.channels" => bit.channels.to_string(),
            "model.width_multiplier" => self.model.backbone.width_multiplier.to_string(),
            "model.image_size" => self.model.image_size.to_string(),
            "model.token_length" => bit.token_length.to_string(),
            "model.encoder_depth" => bit.encoder_depth.to_string(),
            "model.decoder_depth" => bit.decoder_depth.to_string(),
            "model.heads" => bit.heads.to_string(),
            "model.head_dim" => bit.head_dim.to_string(),
            "model.use_tokenizer" => bit.use_tokenizer.to_string(),
            "model.use_encoder" => bit.use_encoder.to_string(),
            "model.use_decoder" => bit.use_decoder.to_string(),
            "model.pe_in_encoder" => bit.pe_in_encoder.to_string(),
            "model.pe_in_decoder" => bit.pe_in_decoder.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.augment" => self.train.augment.to_string(),
            "data.root" => self.data.root.display().to_string(),
            "data.train_split" => self.data.train_split.clone(),
            "data.val_split" => self.data.val_split.clone(),
            "data.test_split" => self.data.test_split.clone(),
            "data.patch_size" => self.data.patch_size.to_string(),
            "synth.train" => self.synth.train.to_string(),
            "synth.val" => self.synth.val.to_string(),
            "synth.test" => self.synth.test.to_string(),
            "synth.size" => self.synth.size.to_string(),
            "vis.split" => self.vis.split.clone(),
            "vis.sample" => self.vis.sample.to_string(),
            "vis.channels" => self.vis.channels.to_string(),
            _ => unreachable!("render only asks for known keys"),
        }
    }

    /// Cross-field constraints; each failure names the offending key.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.patch_size == 0 || !self.data.patch_size.is_multiple_of(4) {
            return Err(Error::config("data.patch_size", "must be a positive multiple of 4"));
        }
        if self.synth.size == 0 || !self.synth.size.is_multiple_of(4) {
            return Err(Error::config("synth.size", "must be a positive multiple of 4"));
        }
        if self.vis.channels == 0 {
            return Err(Error::config("vis.channels", "must be at least 1"));
        }
        Ok(())
    }

    /// One `key = value` line per key; `parse_config` reads it back to an
    /// equal value.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            s.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        s
    }
}

/// Applies `text` on top of `base`. Blank lines and `#` comments are skipped.
pub fn apply_text(base: &mut RunConfig, text: &str) -> Result<()> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
        base.set(key.trim(), value.trim())?;
    }
    Ok(())
}

/// Defaults overlaid with `text`, then validated.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    resolve(Some(text), None, &[])
}

/// Full precedence chain: defaults, file, seed environment value, flags.
pub fn resolve(file: Option<&str>, env_seed: Option<&str>, flags: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(text) = file {
        apply_text(&mut cfg, text)?;
    }
    if let Some(seed) = env_seed {
        cfg.set("seed", seed.trim()).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config(SEED_ENV, reason),
            other => other,
        })?;
    }
    for (key, value) in flags {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `--section.key value` pairs; anything else is an error.
pub fn parse_flags(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::config(a.clone(), "expected a `--section.key value` flag"))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::config(key, "flag is missing its value"))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key, value));
    }
    Ok(out)
}
