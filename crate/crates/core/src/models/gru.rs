//! GRU encoder-decoder used as the learned error generator.

use ocrrestore_neural::{Embedding, Graph, GruCell, Linear, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EOS, PAD, SOS};
use crate::error::{Error, Result};

/// Guards the reciprocal copy penalty against a vanishing cross-entropy.
pub const ANTI_COPY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GruConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Probability of feeding the gold previous character to the decoder.
    pub teacher_forcing: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for GruConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden_dim: 512,
            teacher_forcing: 0.5,
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 30,
            seed: 1,
        }
    }
}

impl GruConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "gru dimensions and batch size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::InvalidConfig(format!(
                "teacher forcing rate {}",
                self.teacher_forcing
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// `2VE + 3H(E + H + 2) + 3H(E + 2H + 2) + (2H + E)V + V`
    pub fn param_count(&self, v: usize) -> usize {
        let (e, h) = (self.embed_dim, self.hidden_dim);
        2 * v * e + GruCell::num_params(e, h) + GruCell::num_params(e + h, h) + Linear::num_params(2 * h + e, v, true)
    }
}

/// The decoder input at every step is `[embedding; context]`, and the output
/// layer reads `[context; hidden; embedding]`. The context is the final
/// encoder state, which also initializes the decoder.
#[derive(Debug, Clone)]
pub struct GruNet {
    pub config: GruConfig,
    pub vocab_size: usize,
    enc_embed: Embedding,
    dec_embed: Embedding,
    encoder: GruCell,
    decoder: GruCell,
    output: Linear,
}

/// How the decoder picks its next input while training.
pub enum Feeding<'r> {
    Gold,
    /// Gold with the given probability per sample and step, otherwise the
    /// model's own argmax.
    Mixed(f64, &'r mut ChaCha8Rng),
}

impl GruNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &GruConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (e, h) = (config.embed_dim, config.hidden_dim);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            enc_embed: Embedding::new(store, "enc_embed", vocab_size, e, rng)?,
            dec_embed: Embedding::new(store, "dec_embed", vocab_size, e, rng)?,
            encoder: GruCell::new(store, "encoder", e, h, rng)?,
            decoder: GruCell::new(store, "decoder", e + h, h, rng)?,
            output: Linear::new(store, "output", 2 * h + e, vocab_size, true, rng)?,
        })
    }

    /// Final encoder state `[B, H]`; padded steps leave the state untouched.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, src: &[usize], b: usize, s: usize) -> Result<Var> {
        let emb = self.enc_embed.forward(g, src, &[b, s])?;
        let mut h = g.constant(Tensor::zeros(&[b, self.config.hidden_dim]))?;
        for t in 0..s {
            let x = g.select_step(emb, t)?;
            let next = self.encoder.forward(g, x, h)?;
            let keep: Vec<T> = (0..b)
                .map(|i| if src[i * s + t] == PAD { T::zero() } else { T::one() })
                .collect();
            h = if keep.iter().all(|&k| k == T::one()) {
                next
            } else {
                let delta = g.sub(next, h)?;
                let delta = g.mul_rows(delta, keep)?;
                g.add(h, delta)?
            };
        }
        Ok(h)
    }

    /// One decoder step from previous ids; returns `(hidden, logits [B, V])`.
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, context: Var, h: Var, prev: &[usize]) -> Result<(Var, Var)> {
        let e = self.dec_embed.forward(g, prev, &[prev.len()])?;
        let x = g.concat(&[e, context])?;
        let h = self.decoder.forward(g, x, h)?;
        let feats = g.concat(&[context, h, e])?;
        Ok((h, self.output.forward(g, feats)?))
    }

    /// Step logits `[B * (T - 1), V]` predicting `labels[:, 1..]`.
    pub fn unroll<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        src: &[usize],
        s: usize,
        labels: &[usize],
        t: usize,
        mut feeding: Feeding<'_>,
    ) -> Result<Var> {
        let b = src.len() / s;
        if t < 2 || labels.len() != b * t {
            return Err(Error::LengthMismatch(format!("labels of width {t} for {b} rows")));
        }
        let context = self.encode(g, src, b, s)?;
        let mut h = context;
        let mut prev = vec![SOS; b];
        let mut steps = Vec::with_capacity(t - 1);
        for step in 0..t - 1 {
            let (next_h, logits) = self.step(g, context, h, &prev)?;
            h = next_h;
            steps.push(logits);
            let values = g.value(logits);
            for (i, p) in prev.iter_mut().enumerate() {
                let gold = labels[i * t + step + 1];
                *p = match &mut feeding {
                    Feeding::Gold => gold,
                    Feeding::Mixed(rate, rng) => {
                        if rng.gen::<f64>() < *rate {
                            gold
                        } else {
                            argmax(&values.data()[i * self.vocab_size..(i + 1) * self.vocab_size])
                        }
                    }
                };
            }
        }
        let stacked = g.stack_steps(&steps)?;
        Ok(g.reshape(stacked, &[b * (t - 1), self.vocab_size])?)
    }

    /// Anti-copy objective: `CE(pred, target) + 1 / (CE(pred, source) + eps)`,
    /// with the source shifted like the target and padded or cut to its width.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        src: &[usize],
        s: usize,
        labels: &[usize],
        t: usize,
        feeding: Feeding<'_>,
    ) -> Result<Var> {
        let b = src.len() / s;
        let logits = self.unroll(g, src, s, labels, t, feeding)?;
        let mut targets = Vec::with_capacity(b * (t - 1));
        let mut sources = Vec::with_capacity(b * (t - 1));
        for i in 0..b {
            targets.extend_from_slice(&labels[i * t + 1..(i + 1) * t]);
            sources.extend((1..t).map(|j| if j < s { src[i * s + j] } else { PAD }));
        }
        let keep: Vec<bool> = targets.iter().map(|&x| x != PAD).collect();
        let keep_src: Vec<bool> = keep.iter().zip(&sources).map(|(&k, &x)| k && x != PAD).collect();
        let fit = g.cross_entropy(logits, &targets, &keep)?;
        let copy = g.cross_entropy(logits, &sources, &keep_src)?;
        let penalty = g.recip(copy, ANTI_COPY_EPS)?;
        Ok(g.add(fit, penalty)?)
    }

    /// Decodes each source independently. `pick` chooses the next id from a
    /// row of logits over the vocabulary; decoding stops at `<eos>` or after
    /// `max_len[i]` symbols.
    pub fn generate(
        &self,
        store: &ParamStore<f32>,
        src: &[usize],
        s: usize,
        max_len: &[usize],
        mut pick: impl FnMut(&[f32]) -> usize,
    ) -> Result<Vec<Vec<usize>>> {
        let b = src.len() / s;
        let mut g = Graph::new(store);
        let context = self.encode(&mut g, src, b, s)?;
        let context_value = g.value(context).clone();
        let mut h_value = context_value.clone();
        let mut prev = vec![SOS; b];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let limit = max_len.iter().copied().max().unwrap_or(0);
        for step in 0..limit {
            let mut g = Graph::new(store);
            let c = g.constant(context_value.clone())?;
            let h = g.constant(h_value)?;
            let (h, logits) = self.step(&mut g, c, h, &prev)?;
            h_value = g.value(h).clone();
            let lv = g.value(logits).data();
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let id = pick(&lv[i * self.vocab_size..(i + 1) * self.vocab_size]);
                if id == EOS || step + 1 >= max_len[i] {
                    done[i] = true;
                }
                if id != EOS {
                    out[i].push(id);
                }
                prev[i] = id;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
