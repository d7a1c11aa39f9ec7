//! Analytic parameter and operation counts.
//!
//! Weighted layers contribute multiply-accumulates (MACs); `flops` counts
//! two per MAC plus one per output element of every normalization,
//! activation, pooling, resize, softmax and residual add. Shared weights
//! are counted once for parameters and once per application for MACs, so
//! the backbone runs twice per pair.

use std::fmt;

use crate::backbone::BackboneVariant;
use crate::error::{Error, Result};
use crate::head::CLASSIFIER_WIDTH;
use crate::model::ModelConfig;
use crate::nn::Module;
use crate::tensor::ops::conv_output_size;
use crate::tensor::Scalar;

const IMAGENET_CLASSES: usize = 1000;

/// Sum of element counts of all learnable tensors.
pub fn count_params<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> u64 {
    model.num_params() as u64
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub input: (usize, usize),
    pub params: u64,
    /// Parameters of the 1000-way ImageNet classifier of a stock ResNet18,
    /// which the model does not hold but hook-based counts of the stock
    /// module include.
    pub vestigial_params: u64,
    pub macs: u64,
    pub flops: u64,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    fn from_entries(input: (usize, usize), vestigial_params: u64, entries: Vec<CostEntry>) -> Self {
        Self {
            input,
            params: entries.iter().map(|e| e.params).sum(),
            vestigial_params,
            macs: entries.iter().map(|e| e.macs).sum(),
            flops: entries.iter().map(|e| e.flops).sum(),
            entries,
        }
    }

    /// MACs divided by the two images of the pair, the per-input figure
    /// usually quoted as "FLOPs" by layer-hook profilers.
    pub fn macs_per_image(&self) -> f64 {
        self.macs as f64 / 2.0
    }

    pub fn params_with_vestigial(&self) -> u64 {
        self.params + self.vestigial_params
    }

    /// `key = value` lines, one block per entry.
    pub fn to_structured(&self) -> String {
        let mut s = format!(
            "input = {}x{}x3\nparams = {}\nparams_with_vestigial = {}\nmacs = {}\nflops = {}\nmacs_per_image = {}\n",
            self.input.0,
            self.input.1,
            self.params,
            self.params_with_vestigial(),
            self.macs,
            self.flops,
            self.macs / 2
        );
        for e in &self.entries {
            s.push_str(&format!(
                "entry.{m}.params = {}\nentry.{m}.macs = {}\nentry.{m}.flops = {}\n",
                e.params,
                e.macs,
                e.flops,
                m = e.module
            ));
        }
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>12} {:>16} {:>16}", "module", "params", "MACs", "FLOPs")?;
        for e in &self.entries {
            writeln!(f, "{:<28} {:>12} {:>16} {:>16}", e.module, e.params, e.macs, e.flops)?;
        }
        writeln!(f, "{:<28} {:>12} {:>16} {:>16}", "total", self.params, self.macs, self.flops)?;
        write!(
            f,
            "params {:.2}M, MACs per image {:.2}G, FLOPs per pair {:.2}G",
            self.params as f64 / 1e6,
            self.macs_per_image() / 1e9,
            self.flops as f64 / 1e9
        )
    }
}

/// Running tally for one named entry.
struct Tally {
    entry: CostEntry,
}

impl Tally {
    fn new(module: impl Into<String>) -> Self {
        Self {
            entry: CostEntry {
                module: module.into(),
                ..CostEntry::default()
            },
        }
    }

    fn params(&mut self, n: usize) {
        self.entry.params += n as u64;
    }

    fn macs(&mut self, n: usize) {
        self.entry.macs += n as u64;
        self.entry.flops += 2 * n as u64;
    }

    fn elementwise(&mut self, n: usize) {
        self.entry.flops += n as u64;
    }

    /// Convolution applied `times` times; returns the output extent.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        (cin, cout): (usize, usize),
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        (h, w): (usize, usize),
        times: usize,
    ) -> Result<(usize, usize)> {
        let oh = conv_output_size(h, k, stride, pad).ok_or_else(|| Error::contract("input too small for profiling"))?;
        let ow = conv_output_size(w, k, stride, pad).ok_or_else(|| Error::contract("input too small for profiling"))?;
        self.params(k * k * cin * cout + if bias { cout } else { 0 });
        self.macs(times * k * k * cin * cout * oh * ow);
        Ok((oh, ow))
    }

    fn batch_norm(&mut self, c: usize, elems: usize) {
        self.params(2 * c);
        self.elementwise(elems);
    }

    /// `n × cin → n × cout` dense layer applied `times` times.
    fn linear(&mut self, cin: usize, cout: usize, bias: bool, n: usize, times: usize) {
        self.params(cin * cout + if bias { cout } else { 0 });
        self.macs(times * n * cin * cout);
    }

    fn layer_norm(&mut self, c: usize, elems: usize) {
        self.params(2 * c);
        self.elementwise(elems);
    }

    fn finish(self) -> CostEntry {
        self.entry
    }
}

/// Cost of a single convolution applied once to a `height × width` input.
pub fn conv_cost(
    (cin, cout): (usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
    (height, width): (usize, usize),
) -> Result<CostEntry> {
    let mut t = Tally::new("conv");
    t.conv((cin, cout), kernel, stride, padding, bias, (height, width), 1)?;
    Ok(t.finish())
}

/// One pre-norm transformer layer with `nq` queries attending to `nk`
/// keys, applied `times` times.
fn transformer_layer(t: &mut Tally, c: usize, inner: usize, heads: usize, nq: usize, nk: usize, times: usize) {
    t.layer_norm(c, times * nq * c);
    t.linear(c, inner, true, nq, times);
    t.linear(c, inner, true, nk, times);
    t.linear(c, inner, true, nk, times);
    // Scores and weighting, summed over heads: inner = heads · d.
    t.macs(times * 2 * nq * nk * inner);
    t.elementwise(times * heads * nq * nk);
    t.linear(inner, c, true, nq, times);
    t.elementwise(times * nq * c);
    t.layer_norm(c, times * nq * c);
    t.linear(c, 2 * c, true, nq, times);
    t.elementwise(times * nq * 2 * c);
    t.linear(2 * c, c, true, nq, times);
    t.elementwise(times * nq * c);
}

/// Costs of one forward pass on a `height × width` image pair.
pub fn count_flops(config: &ModelConfig, height: usize, width: usize) -> Result<CostReport> {
    config.validate()?;
    if height == 0 || width == 0 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
        return Err(Error::contract(format!("input {height}×{width} must be positive multiples of 4")));
    }
    let bb = &config.backbone;
    let widths = bb.widths();
    let mut entries = Vec::new();

    let mut stem = Tally::new("backbone.stem");
    let (h, w) = stem.conv((3, widths[0]), 7, 2, 3, false, (height, width), 2)?;
    stem.batch_norm(widths[0], 2 * widths[0] * h * w);
    stem.elementwise(2 * widths[0] * h * w);
    let mut hw = (conv_output_size(h, 3, 2, 1).unwrap_or(0), conv_output_size(w, 3, 2, 1).unwrap_or(0));
    stem.elementwise(2 * widths[0] * hw.0 * hw.1);
    entries.push(stem.finish());

    const STRIDES: [usize; 4] = [1, 2, 1, 1];
    for layer in 0..bb.variant.residual_layers() {
        let mut t = Tally::new(format!("backbone.layer{}", layer + 1));
        let (cin, cout) = (widths[layer], widths[layer + 1]);
        for block in 0..2 {
            let (bin, stride) = if block == 0 { (cin, STRIDES[layer]) } else { (cout, 1) };
            let out = t.conv((bin, cout), 3, stride, 1, false, hw, 2)?;
            let elems = 2 * cout * out.0 * out.1;
            t.batch_norm(cout, elems);
            t.elementwise(elems);
            t.conv((cout, cout), 3, 1, 1, false, out, 2)?;
            t.batch_norm(cout, elems);
            if stride != 1 || bin != cout {
                t.conv((bin, cout), 1, stride, 0, false, hw, 2)?;
                t.batch_norm(cout, elems);
            }
            t.elementwise(2 * elems);
            hw = out;
        }
        entries.push(t.finish());
    }

    let (fh, fw) = (height / 4, width / 4);
    let c = bb.out_channels;
    let mut proj = Tally::new("backbone.proj");
    proj.conv((widths[bb.variant.residual_layers()], c), 1, 1, 0, true, hw, 2)?;
    proj.elementwise(2 * c * fh * fw);
    entries.push(proj.finish());

    let bit = &config.bit;
    if !bit.is_bypass() {
        let n = fh * fw;
        let tokens = if bit.use_tokenizer { bit.token_length } else { n };
        let inner = bit.inner_dim();
        if bit.use_tokenizer {
            let mut t = Tally::new("bit.tokenizer");
            t.linear(c, bit.token_length, false, n, 2);
            t.elementwise(2 * n * bit.token_length);
            t.macs(2 * bit.token_length * n * c);
            entries.push(t.finish());
        }
        if bit.use_encoder {
            let mut t = Tally::new("bit.encoder");
            if bit.pe_in_encoder {
                t.params(2 * tokens * c);
                t.elementwise(2 * tokens * c);
            }
            for _ in 0..bit.encoder_depth {
                transformer_layer(&mut t, c, inner, bit.heads, 2 * tokens, 2 * tokens, 1);
            }
            entries.push(t.finish());
        }
        let mut t = Tally::new("bit.decoder");
        if bit.use_decoder {
            if bit.pe_in_decoder {
                t.params(n * c);
                t.elementwise(2 * n * c);
            }
            for _ in 0..bit.decoder_depth {
                transformer_layer(&mut t, c, inner, bit.heads, n, tokens, 2);
            }
        } else {
            t.elementwise(2 * n * c);
        }
        entries.push(t.finish());
    }

    let mut head = Tally::new("head.classifier");
    let elems = c * height * width;
    head.elementwise(3 * elems);
    let out = head.conv((c, CLASSIFIER_WIDTH), 3, 1, 1, false, (height, width), 1)?;
    head.batch_norm(CLASSIFIER_WIDTH, CLASSIFIER_WIDTH * out.0 * out.1);
    head.elementwise(CLASSIFIER_WIDTH * out.0 * out.1);
    head.conv((CLASSIFIER_WIDTH, 2), 3, 1, 1, true, out, 1)?;
    head.elementwise(2 * height * width);
    entries.push(head.finish());

    let vestigial = (widths[4] * IMAGENET_CLASSES + IMAGENET_CLASSES) as u64;
    Ok(CostReport::from_entries((height, width), vestigial, entries))
}

/// A named configuration of the efficiency comparison.
#[derive(Clone, Debug)]
pub struct Profile {
    pub name: &'static str,
    pub config: ModelConfig,
}

/// The CNN-only baselines and the BIT models compared for efficiency.
pub fn reference_profiles() -> Vec<Profile> {
    use crate::backbone::BackboneConfig;
    let backbone = |variant| BackboneConfig {
        variant,
        ..BackboneConfig::default()
    };
    let bit = |variant| ModelConfig {
        backbone: backbone(variant),
        ..ModelConfig::default()
    };
    vec![
        Profile {
            name: "Base_S5",
            config: ModelConfig::base(backbone(BackboneVariant::S5)),
        },
        Profile {
            name: "Base_S4",
            config: ModelConfig::base(backbone(BackboneVariant::S4)),
        },
        Profile {
            name: "Base_S3",
            config: ModelConfig::base(backbone(BackboneVariant::S3)),
        },
        Profile {
            name: "BIT_S4",
            config: bit(BackboneVariant::S4),
        },
        Profile {
            name: "BIT_S3",
            config: bit(BackboneVariant::S3),
        },
    ]
}
