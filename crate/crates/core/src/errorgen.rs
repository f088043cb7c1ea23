//! Synthetic OCR-like corruption: random edits, fixed confusion channels and
//! a learned GRU generator.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::Alphabet;
use crate::encoding::{decode_ids, encode_label, PairBatches, EOS};
use crate::error::{Error, Result};
use crate::models::gru::argmax;
use crate::models::train::{fit, TrainOptions};
use crate::models::{build_gru, GruConfig, ModelKind, Seq2SeqModel};
use crate::pairgen::ParallelPair;
use crate::rng::Prng;

/// Source of the random numbers consumed by [`random_errors`].
pub trait Draws {
    /// Uniform in `[0, 1)`.
    fn unit(&mut self) -> f64;
    /// Uniform in `0..n`.
    fn below(&mut self, n: usize) -> usize;
}

impl<R: RngCore + ?Sized> Draws for R {
    fn unit(&mut self) -> f64 {
        self.gen::<f64>()
    }

    fn below(&mut self, n: usize) -> usize {
        self.gen_range(0..n)
    }
}

/// Replays fixed draws; once a queue runs dry it yields 0.99 and 0.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDraws {
    pub units: VecDeque<f64>,
    pub positions: VecDeque<usize>,
}

impl ScriptedDraws {
    pub fn new(units: &[f64], positions: &[usize]) -> Self {
        Self {
            units: units.iter().copied().collect(),
            positions: positions.iter().copied().collect(),
        }
    }
}

impl Draws for ScriptedDraws {
    fn unit(&mut self) -> f64 {
        self.units.pop_front().unwrap_or(0.99)
    }

    fn below(&mut self, n: usize) -> usize {
        self.positions.pop_front().unwrap_or(0).min(n - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            noise_rate: 0.07,
            seed: 1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_rate > 0.0 && self.noise_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "noise rate {} outside (0, 1)",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

/// Which of the three edit actions fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditTrace {
    pub deleted: bool,
    pub added: bool,
    pub replaced: bool,
}

/// Random delete, add and replace actions, tried in that order. Each fires
/// when a uniform draw falls below `noise_rate * len`, with `len` the length
/// of the input word. A deletion never removes the last character.
pub fn random_errors(word: &str, cfg: &NoiseConfig, rng: &mut (impl Draws + ?Sized)) -> Result<String> {
    Ok(random_errors_traced(word, cfg, rng)?.0)
}

pub fn random_errors_traced(
    word: &str,
    cfg: &NoiseConfig,
    rng: &mut (impl Draws + ?Sized),
) -> Result<(String, EditTrace)> {
    if word.is_empty() {
        return Err(Error::EmptyWord);
    }
    let alphabet = Alphabet::finnish();
    let mut chars: Vec<char> = word.chars().collect();
    if let Some(&c) = chars.iter().find(|&&c| !alphabet.contains(c)) {
        return Err(Error::NonAlphabetChar(c));
    }
    let letters = alphabet.letters();
    let threshold = cfg.noise_rate * chars.len() as f64;
    let mut trace = EditTrace::default();
    if rng.unit() < threshold && chars.len() > 1 {
        let i = rng.below(chars.len());
        chars.remove(i);
        trace.deleted = true;
    }
    if rng.unit() < threshold {
        let i = rng.below(chars.len() + 1);
        let c = letters[rng.below(letters.len())];
        chars.insert(i, c);
        trace.added = true;
    }
    if rng.unit() < threshold {
        let i = rng.below(chars.len());
        chars[i] = letters[rng.below(letters.len())];
        trace.replaced = true;
    }
    Ok((chars.into_iter().collect(), trace))
}

/// Per-character categorical cross-entropy, averaged over `mask`.
/// Probabilities are floored at `1e-12`.
fn categorical_ce(pred: &[Vec<f64>], ids: &[usize], mask: &[bool]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for ((row, &id), &keep) in pred.iter().zip(ids).zip(mask) {
        if keep {
            let p = *row.get(id).ok_or(Error::UnknownId(id))?;
            total -= p.max(1e-12).ln();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `CE(pred, target) + 1 / (CE(pred, source) + 1e-8)` for per-position
/// distributions `pred`. Target and source are padded (or cut) to the
/// prediction length; pad positions are skipped, and the second term also
/// skips positions where the source is padding.
pub fn anti_copy_loss(pred: &[Vec<f64>], target: &[usize], source: &[usize]) -> Result<f64> {
    use crate::encoding::PAD;
    let n = pred.len();
    if target.len() > n {
        return Err(Error::LengthMismatch(format!(
            "target of {} symbols for {n} predictions",
            target.len()
        )));
    }
    let fit = |v: &[usize]| -> Vec<usize> { (0..n).map(|i| v.get(i).copied().unwrap_or(PAD)).collect() };
    let (t, s) = (fit(target), fit(source));
    let keep: Vec<bool> = t.iter().map(|&x| x != PAD).collect();
    let keep_src: Vec<bool> = keep.iter().zip(&s).map(|(&k, &x)| k && x != PAD).collect();
    let first = categorical_ce(pred, &t, &keep)?;
    let second = categorical_ce(pred, &s, &keep_src)?;
    Ok(first + 1.0 / (second + crate::models::gru::ANTI_COPY_EPS))
}

/// Produces corrupted versions of clean words.
pub trait Corruptor: Sync {
    fn corrupt_batch(&self, words: &[&str], rng: &mut Prng) -> Result<Vec<String>>;
    fn describe(&self) -> String;
}

impl Corruptor for NoiseConfig {
    fn corrupt_batch(&self, words: &[&str], rng: &mut Prng) -> Result<Vec<String>> {
        words.iter().map(|w| random_errors(w, self, rng)).collect()
    }

    fn describe(&self) -> String {
        format!("random(noise_rate={})", self.noise_rate)
    }
}

/// Leaves every word as it is.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Corruptor for Identity {
    fn corrupt_batch(&self, words: &[&str], _rng: &mut Prng) -> Result<Vec<String>> {
        Ok(words.iter().map(|w| w.to_string()).collect())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Substitutes single characters independently at fixed rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionChannel {
    rules: Vec<(char, char, f64)>,
}

impl ConfusionChannel {
    pub fn new(rules: &[(char, char, f64)]) -> Result<Self> {
        let alphabet = Alphabet::finnish();
        for &(from, to, rate) in rules {
            for c in [from, to] {
                if !alphabet.contains(c) {
                    return Err(Error::NonAlphabetChar(c));
                }
            }
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!("confusion rate {rate}")));
            }
        }
        Ok(Self { rules: rules.to_vec() })
    }

    /// One draw per character covered by a rule, in reading order.
    pub fn apply(&self, word: &str, rng: &mut (impl Draws + ?Sized)) -> String {
        word.chars()
            .map(|c| match self.rules.iter().find(|r| r.0 == c) {
                Some(&(_, to, rate)) if rng.unit() < rate => to,
                _ => c,
            })
            .collect()
    }
}

impl Corruptor for ConfusionChannel {
    fn corrupt_batch(&self, words: &[&str], rng: &mut Prng) -> Result<Vec<String>> {
        Ok(words.iter().map(|w| self.apply(w, rng)).collect())
    }

    fn describe(&self) -> String {
        let rules: Vec<String> = self.rules.iter().map(|(a, b, r)| format!("{a}>{b}:{r}")).collect();
        format!("confusion({})", rules.join(","))
    }
}

/// A GRU trained from correct words to their OCR-erroneous forms.
#[derive(Debug)]
pub struct GeneratorModel {
    model: Seq2SeqModel,
    /// Argmax decoding instead of sampling.
    pub greedy: bool,
    fallbacks: AtomicUsize,
}

/// Symbols decoded beyond the input length at most.
pub const GENERATION_SLACK: usize = 4;
const GENERATION_CHUNK: usize = 256;

impl GeneratorModel {
    pub fn new(model: Seq2SeqModel) -> Result<Self> {
        model.expect_kind(ModelKind::GruGenerator)?;
        Ok(Self {
            model,
            greedy: false,
            fallbacks: AtomicUsize::new(0),
        })
    }

    pub fn model(&self) -> &Seq2SeqModel {
        &self.model
    }

    pub fn into_model(self) -> Seq2SeqModel {
        self.model
    }

    /// Decodes that produced no letters and returned their input instead.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// Samples (or, when `greedy`, takes the argmax of) letters and `<eos>`
    /// at temperature 1, for at most `len + 4` symbols per word.
    pub fn generate_batch(&self, words: &[&str], rng: &mut Prng) -> Result<Vec<String>> {
        let net = self.model.gru()?;
        let vocab = self.model.vocab();
        let allowed = self.model.output_mask();
        let mut out = Vec::with_capacity(words.len());
        for chunk in words.chunks(GENERATION_CHUNK) {
            let sources = chunk
                .iter()
                .map(|w| encode_label(w, vocab))
                .collect::<Result<Vec<_>>>()?;
            let batch = crate::encoding::EncodedBatch::from_sequences(&sources, &sources)?;
            let max_len: Vec<usize> = chunk
                .iter()
                .map(|w| w.chars().count().min(crate::encoding::MAX_WORD_CHARS) + GENERATION_SLACK)
                .collect();
            let greedy = self.greedy;
            let ids = net.generate(self.model.store(), &batch.sources, batch.src_len, &max_len, |logits| {
                if greedy {
                    let masked: Vec<f32> = logits
                        .iter()
                        .zip(&allowed)
                        .map(|(&l, &a)| if a { l } else { f32::NEG_INFINITY })
                        .collect();
                    argmax(&masked)
                } else {
                    sample(logits, &allowed, rng)
                }
            })?;
            for (w, ids) in chunk.iter().zip(ids) {
                let s = decode_ids(&ids, vocab)?;
                if s.is_empty() {
                    self.fallbacks.fetch_add(1, Ordering::Relaxed);
                    out.push(w.to_string());
                } else {
                    out.push(s);
                }
            }
        }
        Ok(out)
    }
}

fn sample(logits: &[f32], allowed: &[bool], rng: &mut Prng) -> usize {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { (l as f64 - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = EOS;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

impl Corruptor for GeneratorModel {
    fn corrupt_batch(&self, words: &[&str], rng: &mut Prng) -> Result<Vec<String>> {
        self.generate_batch(words, rng)
    }

    fn describe(&self) -> String {
        format!("generator(greedy={})", self.greedy)
    }
}

pub fn generate_error(model: &GeneratorModel, word: &str, rng: &mut Prng) -> Result<String> {
    Ok(model.generate_batch(&[word], rng)?.remove(0))
}

/// Trains the GRU on `(correct -> error)` pairs with the anti-copy loss.
pub fn train_error_generator(pairs: &[ParallelPair], cfg: &GruConfig) -> Result<GeneratorModel> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut batches = PairBatches::new(pairs, cfg.batch_size, cfg.seed)?;
    let mut model = build_gru(cfg, crate::encoding::CharVocab::standard())?;
    fit(&mut model, &mut batches, &TrainOptions::with_max_epochs(cfg.max_epochs))?;
    if model.manifest().loss_history.iter().any(|l| !l.is_finite()) {
        warn!("generator loss history contains non-finite values");
    }
    GeneratorModel::new(model)
}
