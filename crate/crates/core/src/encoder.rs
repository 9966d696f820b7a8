//! BERT-style encoder: token + segment + position embeddings followed by
//! post-norm transformer layers (attention, residual add, layer norm,
//! feed-forward, residual add, layer norm).

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::kernels::MASK_BIAS;
use crate::model::{LayerParams, Linear, ParamLayout};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 4,
            model_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            num_layers: 2,
            max_seq_len: 128,
            dropout_p: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Small configuration for tests and gradient checks.
    pub fn tiny(vocab_size: usize, model_dim: usize, num_layers: usize) -> Self {
        EncoderConfig {
            vocab_size,
            model_dim,
            num_heads: 2,
            ffn_dim: 2 * model_dim,
            num_layers,
            max_seq_len: 16,
            dropout_p: 0.1,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config(
                "max_seq_len must leave room for [CLS] and [SEP]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if self.vocab_size == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(
                "vocab_size, model_dim and ffn_dim must be nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Model input for one sequence: `[CLS] tokens… [SEP] [PAD]…`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub input_ids: Vec<usize>,
    pub input_mask: Vec<u8>,
    pub segment_ids: Vec<usize>,
}

impl EncodedInput {
    /// Single-segment, unpadded input.
    pub fn new(input_ids: Vec<usize>) -> Self {
        let n = input_ids.len();
        EncodedInput {
            input_ids,
            input_mask: vec![1; n],
            segment_ids: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.input_ids.len();
        if self.input_mask.len() != n || self.segment_ids.len() != n {
            return Err(Error::Contract(format!(
                "input_ids ({n}), input_mask ({}) and segment_ids ({}) differ in length",
                self.input_mask.len(),
                self.segment_ids.len()
            )));
        }
        if n == 0 {
            return Err(Error::Contract("empty input".into()));
        }
        Ok(())
    }

    /// Positions that may carry an entity span: real tokens minus `[CLS]` and `[SEP]`.
    pub fn span_mask(&self) -> Vec<bool> {
        let real = self.input_mask.iter().filter(|&&m| m == 1).count();
        (0..self.len())
            .map(|i| i > 0 && i + 1 < real && self.input_mask[i] == 1)
            .collect()
    }

    /// Attention bias per key position: 0 for real tokens, a large negative value for padding.
    pub fn attention_bias<T: Float>(&self) -> Tensor<T> {
        Tensor::vector(
            self.input_mask
                .iter()
                .map(|&m| if m == 1 { T::zero() } else { T::lit(MASK_BIAS) })
                .collect(),
        )
    }
}

pub fn linear<T: Float, B: Backend<T>>(b: &mut B, x: &B::Value, lin: Linear) -> Result<B::Value> {
    let w = b.param(lin.weight);
    let bias = b.param(lin.bias);
    let y = b.matmul(x, &w)?;
    b.add(&y, &bias)
}

pub fn embed_inputs<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &EncoderConfig,
    layout: &ParamLayout,
    x: &EncodedInput,
) -> Result<B::Value> {
    x.validate()?;
    let n = x.len();
    if n > config.max_seq_len {
        return Err(Error::Length {
            len: n,
            max: config.max_seq_len,
        });
    }
    let tok_table = b.param(layout.token_emb);
    let seg_table = b.param(layout.segment_emb);
    let pos_table = b.param(layout.position_emb);
    let tok = b.embedding(&tok_table, &x.input_ids)?;
    let seg = b.embedding(&seg_table, &x.segment_ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = b.embedding(&pos_table, &positions)?;
    let sum = b.add(&tok, &seg)?;
    let sum = b.add(&sum, &pos)?;
    b.dropout(&sum, config.dropout_p)
}

/// Scaled dot-product attention over `num_heads` heads, keys with bias
/// [`MASK_BIAS`] receiving zero weight, then the output projection.
pub fn multi_head_attention<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &EncoderConfig,
    layer: &LayerParams,
    x: &B::Value,
    key_bias: &B::Value,
) -> Result<B::Value> {
    let q = linear(b, x, layer.query)?;
    let k = linear(b, x, layer.key)?;
    let v = linear(b, x, layer.value)?;
    let dk = config.head_dim();
    let inv_scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = b.slice_cols(&q, h * dk, dk)?;
        let kh = b.slice_cols(&k, h * dk, dk)?;
        let vh = b.slice_cols(&v, h * dk, dk)?;
        let kt = b.transpose(&kh)?;
        let scores = b.matmul(&qh, &kt)?;
        let scores = b.scale(&scores, inv_scale);
        let scores = b.add(&scores, key_bias)?;
        let alpha = b.softmax(&scores, 1)?;
        heads.push(b.matmul(&alpha, &vh)?);
    }
    let z = if heads.len() == 1 {
        heads.pop().expect("one head")
    } else {
        b.concat_cols(&heads)?
    };
    linear(b, &z, layer.output)
}

/// `relu(x·W¹ + b¹)·W² + b²`
pub fn feed_forward<T: Float, B: Backend<T>>(
    b: &mut B,
    layer: &LayerParams,
    x: &B::Value,
) -> Result<B::Value> {
    let h = linear(b, x, layer.ffn_in)?;
    let h = b.relu(&h);
    linear(b, &h, layer.ffn_out)
}

pub fn encoder_layer<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &EncoderConfig,
    layer: &LayerParams,
    x: &B::Value,
    key_bias: &B::Value,
) -> Result<B::Value> {
    let attn = multi_head_attention(b, config, layer, x, key_bias)?;
    let attn = b.dropout(&attn, config.dropout_p)?;
    let res = b.add(x, &attn)?;
    let (g1, b1) = (b.param(layer.ln1_gamma), b.param(layer.ln1_beta));
    let u = b.layer_norm(&res, &g1, &b1, config.ln_eps)?;

    let ffn = feed_forward(b, layer, &u)?;
    let ffn = b.dropout(&ffn, config.dropout_p)?;
    let res = b.add(&u, &ffn)?;
    let (g2, b2) = (b.param(layer.ln2_gamma), b.param(layer.ln2_beta));
    b.layer_norm(&res, &g2, &b2, config.ln_eps)
}

/// Hidden states `[n × model_dim]` for one sequence.
pub fn encode<T: Float, B: Backend<T>>(
    b: &mut B,
    config: &EncoderConfig,
    layout: &ParamLayout,
    x: &EncodedInput,
) -> Result<B::Value> {
    let mut h = embed_inputs(b, config, layout, x)?;
    let bias = b.constant(x.attention_bias());
    for layer in &layout.layers {
        h = encoder_layer(b, config, layer, &h, &bias)?;
    }
    Ok(h)
}
