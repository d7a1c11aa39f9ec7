//! Bitemporal image transformer: semantic tokenizer, token encoder over both
//! temporals, and a Siamese cross-attention decoder back onto the pixels.

use rand::Rng;

use crate::backbone::{FeatureMap, Temporal};
use crate::error::{Error, Result};
use crate::nn::{join, LayerNorm, Linear, Module, Param};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor, Var};

/// Standard deviation of the positional-embedding initialization.
pub const PE_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct BitConfig {
    pub token_length: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub channels: usize,
    pub use_tokenizer: bool,
    pub use_encoder: bool,
    pub use_decoder: bool,
    pub pe_in_encoder: bool,
    pub pe_in_decoder: bool,
}

impl Default for BitConfig {
    fn default() -> Self {
        Self {
            token_length: 4,
            encoder_depth: 1,
            decoder_depth: 8,
            heads: 8,
            head_dim: 8,
            channels: 32,
            use_tokenizer: true,
            use_encoder: true,
            use_decoder: true,
            pe_in_encoder: true,
            pe_in_decoder: false,
        }
    }
}

impl BitConfig {
    /// True when every stage is switched off and the transformer is skipped.
    pub fn is_bypass(&self) -> bool {
        !(self.use_tokenizer || self.use_encoder || self.use_decoder)
    }

    /// Width of the concatenated heads.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("token_length", self.token_length),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{key}"), "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Scaled dot-product attention on `[N, n, d]` operands: each query row
/// becomes a softmax-weighted average of the value rows.
pub fn attention<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(Error::contract(format!("attention expects rank-3 operands, got {sq:?}, {sk:?}, {sv:?}")));
    }
    if sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::dim("attention q/k", sq, sk));
    }
    if sk[0] != sv[0] || sk[1] != sv[1] {
        return Err(Error::dim("attention k/v", sk, sv));
    }
    ops::multi_head_attention(q, k, v, 1)
}

/// Multi-head attention with per-head query/key/value projections (stacked
/// into one `C × h·d` matrix each) and an output projection back to `C`.
#[derive(Debug)]
pub struct MultiHeadAttention<T: Scalar> {
    pub heads: usize,
    pub head_dim: usize,
    pub to_q: Linear<T>,
    pub to_k: Linear<T>,
    pub to_v: Linear<T>,
    pub to_out: Linear<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, heads: usize, head_dim: usize, rng: &mut R) -> Self {
        let inner = heads * head_dim;
        Self {
            heads,
            head_dim,
            to_q: Linear::new(&join(prefix, "to_q"), channels, inner, true, rng),
            to_k: Linear::new(&join(prefix, "to_k"), channels, inner, true, rng),
            to_v: Linear::new(&join(prefix, "to_v"), channels, inner, true, rng),
            to_out: Linear::new(&join(prefix, "to_out"), inner, channels, true, rng),
        }
    }

    /// Queries from `query [B, n_q, C]`, keys and values from `context [B, n_k, C]`.
    pub fn forward(&self, query: &Var<T>, context: &Var<T>) -> Result<Var<T>> {
        let (sq, sc) = (query.shape(), context.shape());
        if sq.len() != 3 || sc.len() != 3 || sq[0] != sc[0] || sq[2] != sc[2] {
            return Err(Error::dim("multi-head attention", sq, sc));
        }
        let q = self.to_q.forward(query)?;
        let k = self.to_k.forward(context)?;
        let v = self.to_v.forward(context)?;
        self.to_out.forward(&ops::multi_head_attention(&q, &k, &v, self.heads)?)
    }
}

impl<T: Scalar> Module<T> for MultiHeadAttention<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.to_q.params();
        p.extend(self.to_k.params());
        p.extend(self.to_v.params());
        p.extend(self.to_out.params());
        p
    }
}

/// `C → 2C → C` with GELU in between.
#[derive(Debug)]
pub struct FeedForward<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(&join(prefix, "fc1"), channels, 2 * channels, true, rng),
            fc2: Linear::new(&join(prefix, "fc2"), 2 * channels, channels, true, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        self.fc2.forward(&ops::gelu(&self.fc1.forward(x)?))
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Pre-norm self-attention layer over the token sequence.
#[derive(Debug)]
pub struct EncoderLayer<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: FeedForward<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn new<R: Rng + ?Sized>(prefix: &str, cfg: &BitConfig, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(&join(prefix, "norm1"), cfg.channels),
            attn: MultiHeadAttention::new(&join(prefix, "attn"), cfg.channels, cfg.heads, cfg.head_dim, rng),
            norm2: LayerNorm::new(&join(prefix, "norm2"), cfg.channels),
            mlp: FeedForward::new(&join(prefix, "mlp"), cfg.channels, rng),
        }
    }

    pub fn forward(&self, t: &Var<T>) -> Result<Var<T>> {
        let n = self.norm1.forward(t)?;
        let t = ops::add_same(t, &self.attn.forward(&n, &n)?)?;
        let n = self.norm2.forward(&t)?;
        ops::add_same(&t, &self.mlp.forward(&n)?)
    }
}

impl<T: Scalar> Module<T> for EncoderLayer<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.mlp.params());
        p
    }
}

/// Pre-norm cross-attention layer: pixels query the tokens. Only the pixel
/// stream is normalized; tokens enter the attention as they are.
#[derive(Debug)]
pub struct DecoderLayer<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: FeedForward<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    fn new<R: Rng + ?Sized>(prefix: &str, cfg: &BitConfig, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(&join(prefix, "norm1"), cfg.channels),
            attn: MultiHeadAttention::new(&join(prefix, "attn"), cfg.channels, cfg.heads, cfg.head_dim, rng),
            norm2: LayerNorm::new(&join(prefix, "norm2"), cfg.channels),
            mlp: FeedForward::new(&join(prefix, "mlp"), cfg.channels, rng),
        }
    }

    pub fn forward(&self, x: &Var<T>, tokens: &Var<T>) -> Result<Var<T>> {
        let n = self.norm1.forward(x)?;
        let x = ops::add_same(x, &self.attn.forward(&n, tokens)?)?;
        let n = self.norm2.forward(&x)?;
        ops::add_same(&x, &self.mlp.forward(&n)?)
    }
}

impl<T: Scalar> Module<T> for DecoderLayer<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.mlp.params());
        p
    }
}

/// Point-wise projection to `L` logits per pixel, softmax over pixels.
#[derive(Debug)]
pub struct Tokenizer<T: Scalar> {
    /// `[C, L]` kernel. There is no bias: a per-token constant cancels in
    /// the softmax over pixels.
    pub kernel: Linear<T>,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, token_length: usize, rng: &mut R) -> Self {
        Self {
            kernel: Linear::new(&join(prefix, "kernel"), channels, token_length, false, rng),
        }
    }

    /// `x [B, HW, C]` → tokens `[B, L, C]` and attention `[B, HW, L]`.
    pub fn forward(&self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        tokenize(x, &self.kernel.weight.var())
    }
}

impl<T: Scalar> Module<T> for Tokenizer<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.kernel.params()
    }
}

/// Spatial attention `A = softmax_HW(X·W)` and tokens `T = Aᵀ·X`.
pub fn tokenize<T: Scalar>(x: &Var<T>, kernel: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("tokenize expects [B, HW, C], got {s:?}")));
    }
    let logits = ops::linear(x, kernel, None)?;
    let attn = ops::softmax(&logits, 1)?;
    let tokens = ops::bmm(&ops::permute(&attn, &[0, 2, 1])?, x)?;
    Ok((tokens, attn))
}

/// Everything the transformer produced for one pair.
#[derive(Clone, Debug)]
pub struct BitOutput<T: Scalar> {
    pub refined: (FeatureMap<T>, FeatureMap<T>),
    /// Per-temporal token sets after the encoder, `[B, L, C]` each.
    pub tokens: Option<(Var<T>, Var<T>)>,
    /// Per-temporal spatial attention `[B, HW, L]`, when the tokenizer is on.
    pub attention: Option<(Var<T>, Var<T>)>,
}

#[derive(Debug)]
pub struct Bit<T: Scalar> {
    pub config: BitConfig,
    /// Pixels per temporal map; fixes the dense-token and decoder embeddings.
    pub feature_pixels: usize,
    pub tokenizer: Option<Tokenizer<T>>,
    pub pos_embedding: Option<Param<T>>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder_pos_embedding: Option<Param<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
}

impl<T: Scalar> Bit<T> {
    /// `feature_pixels` is `H·W` of the backbone output the model will see.
    pub fn new<R: Rng + ?Sized>(config: BitConfig, feature_pixels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let tokenizer = config
            .use_tokenizer
            .then(|| Tokenizer::new("bit.tokenizer", c, config.token_length, rng));
        let tokens_per_temporal = if config.use_tokenizer {
            config.token_length
        } else {
            feature_pixels
        };
        let pos_embedding = (config.use_encoder && config.pe_in_encoder).then(|| {
            Param::new(
                "bit.pos_embedding",
                Tensor::randn(&[2 * tokens_per_temporal, c], PE_INIT_STD, rng),
                false,
            )
        });
        let encoder = if config.use_encoder {
            (0..config.encoder_depth)
                .map(|i| EncoderLayer::new(&format!("bit.encoder.{i}"), &config, rng))
                .collect()
        } else {
            Vec::new()
        };
        let decoder_pos_embedding = (config.use_decoder && config.pe_in_decoder).then(|| {
            Param::new(
                "bit.decoder_pos_embedding",
                Tensor::randn(&[feature_pixels, c], PE_INIT_STD, rng),
                false,
            )
        });
        let decoder = if config.use_decoder {
            (0..config.decoder_depth)
                .map(|i| DecoderLayer::new(&format!("bit.decoder.{i}"), &config, rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            feature_pixels,
            tokenizer,
            pos_embedding,
            encoder,
            decoder_pos_embedding,
            decoder,
        })
    }

    /// Adds the positional embedding once, then runs the encoder stack on
    /// the concatenated `[B, 2L, C]` sequence.
    pub fn encode(&self, tokens: &Var<T>) -> Result<Var<T>> {
        let mut t = match &self.pos_embedding {
            Some(pe) => {
                let pe = pe.var();
                if tokens.shape()[1..] != *pe.shape() {
                    return Err(Error::dim("positional embedding", tokens.shape(), pe.shape()));
                }
                ops::add(tokens, &pe)?
            }
            None => tokens.clone(),
        };
        for layer in &self.encoder {
            t = layer.forward(&t)?;
        }
        Ok(t)
    }

    /// Refines the `[B, HW, C]` pixel sequence of one temporal against its tokens.
    pub fn decode(&self, pixels: &Var<T>, tokens: &Var<T>) -> Result<Var<T>> {
        let mut x = match &self.decoder_pos_embedding {
            Some(pe) => {
                let pe = pe.var();
                if pixels.shape()[1..] != *pe.shape() {
                    return Err(Error::dim("decoder positional embedding", pixels.shape(), pe.shape()));
                }
                ops::add(pixels, &pe)?
            }
            None => pixels.clone(),
        };
        for layer in &self.decoder {
            x = layer.forward(&x, tokens)?;
        }
        Ok(x)
    }

    pub fn forward(&self, x1: &FeatureMap<T>, x2: &FeatureMap<T>) -> Result<BitOutput<T>> {
        if x1.values.shape() != x2.values.shape() {
            return Err(Error::contract(format!(
                "bitemporal feature maps differ in shape: {:?} vs {:?}",
                x1.values.shape(),
                x2.values.shape()
            )));
        }
        if self.config.is_bypass() {
            return Ok(BitOutput {
                refined: (x1.clone(), x2.clone()),
                tokens: None,
                attention: None,
            });
        }
        let (_, c, h, w) = x1.dims();
        if c != self.config.channels {
            return Err(Error::dim("bit channels", x1.values.shape(), &[self.config.channels]));
        }
        let (s1, s2) = (x1.flatten()?, x2.flatten()?);
        let (t1, t2, attention) = match &self.tokenizer {
            Some(tok) => {
                let (t1, a1) = tok.forward(&s1)?;
                let (t2, a2) = tok.forward(&s2)?;
                (t1, t2, Some((a1, a2)))
            }
            None => (s1.clone(), s2.clone(), None),
        };
        let (t1, t2) = if self.config.use_encoder {
            let n = t1.shape()[1];
            let joint = self.encode(&ops::concat(&[t1, t2], 1)?)?;
            (ops::narrow(&joint, 1, 0, n)?, ops::narrow(&joint, 1, n, n)?)
        } else {
            (t1, t2)
        };
        let (r1, r2) = if self.config.use_decoder {
            (self.decode(&s1, &t1)?, self.decode(&s2, &t2)?)
        } else {
            // Every pixel receives the sum of its temporal's tokens.
            (
                ops::add(&s1, &ops::sum_axis(&t1, 1)?)?,
                ops::add(&s2, &ops::sum_axis(&t2, 1)?)?,
            )
        };
        Ok(BitOutput {
            refined: (
                FeatureMap::unflatten(&r1, h, w, Temporal::First)?,
                FeatureMap::unflatten(&r2, h, w, Temporal::Second)?,
            ),
            tokens: Some((t1, t2)),
            attention,
        })
    }
}

impl<T: Scalar> Module<T> for Bit<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = Vec::new();
        if let Some(t) = &self.tokenizer {
            p.extend(t.params());
        }
        p.extend(self.pos_embedding.as_ref());
        for l in &self.encoder {
            p.extend(l.params());
        }
        p.extend(self.decoder_pos_embedding.as_ref());
        for l in &self.decoder {
            p.extend(l.params());
        }
        p
    }
}
