//! Pre-norm encoder-decoder transformer over character ids.

use ocrrestore_neural::{
    attention_mask, Embedding, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamStore, Real, Tensor, Var,
};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::PAD;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Rows of each learned positional table.
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            d_model: 128,
            d_ff: 512,
            dropout: 0.1,
            lr: 5e-4,
            batch_size: 256,
            max_epochs: 30,
            max_positions: 160,
            seed: 1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 {
            return bad("transformer needs at least one layer".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.d_ff == 0 || self.batch_size == 0 || self.max_positions < 2 {
            return bad("d_ff, batch_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        Ok(())
    }

    /// Closed-form parameter count for a vocabulary of `v` symbols:
    ///
    /// ```text
    /// 2Vd + 2Pd                                  token and position tables
    /// + L * (4(d^2 + d) + 2df + f + d + 4d)      encoder layers
    /// + L * (8(d^2 + d) + 2df + f + d + 6d)      decoder layers
    /// + 4d + dV + V                              final norms and projection
    /// ```
    pub fn param_count(&self, v: usize) -> usize {
        let (d, f, l, p) = (self.d_model, self.d_ff, self.layers, self.max_positions);
        let ff = 2 * d * f + f + d;
        2 * v * d
            + 2 * p * d
            + l * (4 * (d * d + d) + ff + 4 * d)
            + l * (8 * (d * d + d) + ff + 6 * d)
            + 4 * d
            + d * v
            + v
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct TransformerNet {
    pub config: TransformerConfig,
    pub vocab_size: usize,
    src_embed: Embedding,
    tgt_embed: Embedding,
    src_pos: Embedding,
    tgt_pos: Embedding,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: LayerNorm,
    dec_norm: LayerNorm,
    generator: Linear,
}

fn pad_mask(ids: &[usize], b: usize, t: usize) -> Vec<Vec<bool>> {
    (0..b)
        .map(|i| ids[i * t..(i + 1) * t].iter().map(|&x| x == PAD).collect())
        .collect()
}

fn positions(b: usize, t: usize) -> Vec<usize> {
    (0..b).flat_map(|_| 0..t).collect()
}

impl TransformerNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &TransformerConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, h, f) = (config.d_model, config.heads, config.d_ff);
        let src_embed = Embedding::new(store, "src_embed", vocab_size, d, rng)?;
        let tgt_embed = Embedding::new(store, "tgt_embed", vocab_size, d, rng)?;
        let src_pos = Embedding::new(store, "src_pos", config.max_positions, d, rng)?;
        let tgt_pos = Embedding::new(store, "tgt_pos", config.max_positions, d, rng)?;
        let mut encoder = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, h, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, f, rng)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, h, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, h, rng)?,
                norm3: LayerNorm::new(store, &format!("{p}.norm3"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, f, rng)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            src_embed,
            tgt_embed,
            src_pos,
            tgt_pos,
            encoder,
            decoder,
            enc_norm: LayerNorm::new(store, "encoder.norm", d)?,
            dec_norm: LayerNorm::new(store, "decoder.norm", d)?,
            generator: Linear::new(store, "generator", d, vocab_size, true, rng)?,
        })
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t > self.config.max_positions {
            return Err(Error::InvalidConfig(format!(
                "sequence of {t} symbols exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn embed<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &Embedding,
        pos: &Embedding,
        ids: &[usize],
        b: usize,
        t: usize,
    ) -> Result<Var> {
        self.check_len(t)?;
        let x = tokens.forward(g, ids, &[b, t])?;
        let p = pos.forward(g, &positions(b, t), &[b, t])?;
        let x = g.add(x, p)?;
        Ok(g.dropout(x, self.config.dropout)?)
    }

    /// Encoder memory `[B, S, d]` for row-major `src` ids of shape `[B, S]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, src: &[usize], b: usize, s: usize) -> Result<Var> {
        let p = self.config.dropout;
        let mask = attention_mask::<T>(&pad_mask(src, b, s), s, false);
        let mut x = self.embed(g, &self.src_embed, &self.src_pos, src, b, s)?;
        for layer in &self.encoder {
            let h = layer.norm1.forward(g, x)?;
            let h = layer.attn.forward(g, h, h, Some(&mask), p)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
            let h = layer.norm2.forward(g, x)?;
            let h = layer.ff.forward(g, h, p)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
        }
        Ok(self.enc_norm.forward(g, x)?)
    }

    /// Logits `[B, T, V]` for decoder inputs `tgt` of shape `[B, T]`.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        src_pad: &[Vec<bool>],
        tgt: &[usize],
        b: usize,
        t: usize,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let self_mask = attention_mask::<T>(&pad_mask(tgt, b, t), t, true);
        let cross_mask = attention_mask::<T>(src_pad, t, false);
        let mut y = self.embed(g, &self.tgt_embed, &self.tgt_pos, tgt, b, t)?;
        for layer in &self.decoder {
            let h = layer.norm1.forward(g, y)?;
            let h = layer.self_attn.forward(g, h, h, Some(&self_mask), p)?;
            let h = g.dropout(h, p)?;
            y = g.add(y, h)?;
            let h = layer.norm2.forward(g, y)?;
            let h = layer.cross_attn.forward(g, h, memory, Some(&cross_mask), p)?;
            let h = g.dropout(h, p)?;
            y = g.add(y, h)?;
            let h = layer.norm3.forward(g, y)?;
            let h = layer.ff.forward(g, h, p)?;
            let h = g.dropout(h, p)?;
            y = g.add(y, h)?;
        }
        let y = self.dec_norm.forward(g, y)?;
        Ok(self.generator.forward(g, y)?)
    }

    /// Teacher-forced mean cross-entropy of `labels` (`[B, T]`, each row
    /// `<sos> ... <eos>` then pads) given `src` (`[B, S]`).
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        src: &[usize],
        s: usize,
        labels: &[usize],
        t: usize,
    ) -> Result<Var> {
        let b = src.len() / s;
        if t < 2 || labels.len() != b * t {
            return Err(Error::LengthMismatch(format!("labels of width {t} for {b} rows")));
        }
        let memory = self.encode(g, src, b, s)?;
        let mut inputs = Vec::with_capacity(b * (t - 1));
        let mut targets = Vec::with_capacity(b * (t - 1));
        for row in labels.chunks(t) {
            inputs.extend_from_slice(&row[..t - 1]);
            targets.extend_from_slice(&row[1..]);
        }
        let logits = self.decode(g, memory, &pad_mask(src, b, s), &inputs, b, t - 1)?;
        let logits = g.reshape(logits, &[b * (t - 1), self.vocab_size])?;
        let mask: Vec<bool> = targets.iter().map(|&x| x != PAD).collect();
        Ok(g.cross_entropy(logits, &targets, &mask)?)
    }
}

/// Copies rows of a `[N, S, d]` memory tensor, one per entry of `rows`.
pub(crate) fn gather_rows<T: Real>(memory: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let s = memory.shape();
    let width = s[1] * s[2];
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(&memory.data()[r * width..(r + 1) * width]);
    }
    Tensor::new(&[rows.len(), s[1], s[2]], data).expect("gathered shape")
}
