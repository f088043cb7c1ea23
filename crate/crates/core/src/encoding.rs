//! Conversion between windowed word samples and character-id sequences.

use std::fmt;

use log::warn;
use rand::seq::SliceRandom;

use crate::corpus::{sliding_windows, Alphabet, TokenStream, Window, WindowSample};
use crate::error::{Error, Result};
use crate::errorgen::Corruptor;
use crate::pairgen::ParallelPair;
use crate::rng;

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
pub const CTX: usize = 3;
pub const PAD: usize = 4;
const SPECIALS: [&str; 5] = ["<sos>", "<eos>", "<sep>", "<ctx>", "<pad>"];

/// Words longer than this are truncated before encoding.
pub const MAX_WORD_CHARS: usize = 30;

/// Special tokens (ids 0..=4) followed by the alphabet letters in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    alphabet: Alphabet,
}

impl CharVocab {
    pub fn new(alphabet: Alphabet) -> Self {
        Self { alphabet }
    }

    pub fn standard() -> Self {
        Self::new(Alphabet::finnish())
    }

    pub fn len(&self) -> usize {
        SPECIALS.len() + self.alphabet.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn id_of(&self, c: char) -> Result<usize> {
        self.alphabet
            .index_of(c)
            .map(|i| i + SPECIALS.len())
            .ok_or(Error::NonAlphabetChar(c))
    }

    /// The character for a letter id, `None` for specials.
    pub fn char_of(&self, id: usize) -> Result<Option<char>> {
        if id < SPECIALS.len() {
            Ok(None)
        } else {
            self.alphabet
                .letters()
                .get(id - SPECIALS.len())
                .map(|&c| Some(c))
                .ok_or(Error::UnknownId(id))
        }
    }

    pub fn is_letter(&self, id: usize) -> bool {
        id >= SPECIALS.len() && id < self.len()
    }

    pub fn symbol(&self, id: usize) -> Result<String> {
        match self.char_of(id)? {
            Some(c) => Ok(c.to_string()),
            None => Ok(SPECIALS[id].to_string()),
        }
    }

    /// Every symbol in id order.
    pub fn symbols(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.symbol(i).expect("in range")).collect()
    }

    /// Space-separated symbols, e.g. `<sos> f a r g e t <eos>`.
    pub fn render(&self, ids: &[usize]) -> Result<String> {
        Ok(ids
            .iter()
            .map(|&i| self.symbol(i))
            .collect::<Result<Vec<_>>>()?
            .join(" "))
    }

    fn push_word(&self, out: &mut Vec<usize>, word: &str) -> Result<()> {
        let n = word.chars().count();
        if n > MAX_WORD_CHARS {
            warn!("truncating {n}-character word to {MAX_WORD_CHARS}");
        }
        for c in word.chars().take(MAX_WORD_CHARS) {
            out.push(self.id_of(c)?);
        }
        Ok(())
    }

    fn push_context(&self, out: &mut Vec<usize>, words: &[String]) -> Result<()> {
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            self.push_word(out, w)?;
        }
        Ok(())
    }
}

impl Default for CharVocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl fmt::Display for CharVocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbols().join(" "))
    }
}

/// Source sequence for one window:
/// `<sos> left <sep> ... <ctx> target <ctx> right <sep> ... <eos>`, or
/// `<sos> target <eos>` for a window of one.
pub fn encode_window(sample: &WindowSample, window: Window, vocab: &CharVocab) -> Result<Vec<usize>> {
    let mut out = vec![SOS];
    if window.size() == 1 {
        vocab.push_word(&mut out, &sample.target_corrupted)?;
    } else {
        vocab.push_context(&mut out, &sample.left)?;
        out.push(CTX);
        vocab.push_word(&mut out, &sample.target_corrupted)?;
        out.push(CTX);
        vocab.push_context(&mut out, &sample.right)?;
    }
    out.push(EOS);
    Ok(out)
}

/// `<sos> w o r d <eos>`
pub fn encode_label(word: &str, vocab: &CharVocab) -> Result<Vec<usize>> {
    let mut out = vec![SOS];
    vocab.push_word(&mut out, word)?;
    out.push(EOS);
    Ok(out)
}

/// Letters up to the first `<eos>`; other specials are skipped.
pub fn decode_ids(ids: &[usize], vocab: &CharVocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if let Some(c) = vocab.char_of(id)? {
            out.push(c);
        }
    }
    Ok(out)
}

/// A padded mini-batch of source and label sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// Row-major `batch x src_len`.
    pub sources: Vec<usize>,
    /// Row-major `batch x tgt_len`.
    pub labels: Vec<usize>,
}

impl EncodedBatch {
    pub fn from_sequences(sources: &[Vec<usize>], labels: &[Vec<usize>]) -> Result<Self> {
        if sources.len() != labels.len() || sources.is_empty() {
            return Err(Error::LengthMismatch(format!(
                "{} sources and {} labels",
                sources.len(),
                labels.len()
            )));
        }
        let pad = |rows: &[Vec<usize>]| {
            let len = rows.iter().map(Vec::len).max().unwrap_or(0);
            let mut flat = Vec::with_capacity(rows.len() * len);
            for r in rows {
                flat.extend_from_slice(r);
                flat.extend(std::iter::repeat_n(PAD, len - r.len()));
            }
            (len, flat)
        };
        let (src_len, sources) = pad(sources);
        let (tgt_len, labels) = pad(labels);
        Ok(Self {
            batch: sources.len() / src_len.max(1),
            src_len,
            tgt_len,
            sources,
            labels,
        })
    }

    pub fn source_row(&self, i: usize) -> &[usize] {
        &self.sources[i * self.src_len..(i + 1) * self.src_len]
    }

    pub fn label_row(&self, i: usize) -> &[usize] {
        &self.labels[i * self.tgt_len..(i + 1) * self.tgt_len]
    }

    pub fn source_pad_mask(&self) -> Vec<Vec<bool>> {
        (0..self.batch)
            .map(|i| self.source_row(i).iter().map(|&t| t == PAD).collect())
            .collect()
    }
}

/// Produces the batches of one training epoch.
pub trait BatchSource {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<EncodedBatch>>;
    fn window(&self) -> Window;
    fn vocab(&self) -> &CharVocab;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Stable digest of the underlying clean data.
    fn fingerprint(&self) -> u64;
    fn describe(&self) -> String;
}

/// Dynamic data loader: every epoch shuffles the windows and re-corrupts
/// every target word. Context words stay clean.
pub struct DynamicLoader<'c> {
    samples: Vec<WindowSample>,
    window: Window,
    vocab: CharVocab,
    corruptor: &'c dyn Corruptor,
    batch_size: usize,
    seed: u64,
    fingerprint: u64,
}

pub fn make_batches<'c>(
    stream: &TokenStream,
    window: Window,
    corruptor: &'c dyn Corruptor,
    batch_size: usize,
    seed: u64,
) -> Result<DynamicLoader<'c>> {
    if stream.is_empty() {
        return Err(Error::EmptyStream);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let vocab = CharVocab::standard();
    for t in stream.tokens() {
        for c in t.chars() {
            vocab.id_of(c)?;
        }
    }
    Ok(DynamicLoader {
        samples: sliding_windows(stream, window),
        window,
        vocab,
        corruptor,
        batch_size,
        seed,
        fingerprint: stream_fingerprint(stream),
    })
}

pub fn stream_fingerprint(stream: &TokenStream) -> u64 {
    let mut bytes = Vec::new();
    for (i, t) in stream.tokens().iter().enumerate() {
        bytes.extend_from_slice(t.as_bytes());
        bytes.push(if stream.doc_boundaries().contains(&(i + 1)) {
            b'\n'
        } else {
            b' '
        });
    }
    rng::digest(&bytes)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::SHUFFLE, epoch as u64]));
    order
}

impl DynamicLoader<'_> {
    /// Clean samples in one epoch's order, with freshly corrupted targets.
    pub fn epoch_samples(&self, epoch: usize) -> Result<Vec<Vec<WindowSample>>> {
        let order = shuffled(self.samples.len(), self.seed, epoch);
        let mut out = Vec::new();
        for (b, chunk) in order.chunks(self.batch_size).enumerate() {
            let mut r = rng::stream(self.seed, &[rng::CORRUPT, epoch as u64, b as u64]);
            let labels: Vec<&str> = chunk.iter().map(|&i| self.samples[i].label.as_str()).collect();
            let corrupted = self.corruptor.corrupt_batch(&labels, &mut r)?;
            out.push(
                chunk
                    .iter()
                    .zip(corrupted)
                    .map(|(&i, c)| WindowSample {
                        target_corrupted: c,
                        ..self.samples[i].clone()
                    })
                    .collect(),
            );
        }
        Ok(out)
    }
}

impl BatchSource for DynamicLoader<'_> {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<EncodedBatch>> {
        self.epoch_samples(epoch)?
            .iter()
            .map(|samples| {
                let sources = samples
                    .iter()
                    .map(|s| encode_window(s, self.window, &self.vocab))
                    .collect::<Result<Vec<_>>>()?;
                let labels = samples
                    .iter()
                    .map(|s| encode_label(&s.label, &self.vocab))
                    .collect::<Result<Vec<_>>>()?;
                EncodedBatch::from_sequences(&sources, &labels)
            })
            .collect()
    }

    fn window(&self) -> Window {
        self.window
    }

    fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn describe(&self) -> String {
        format!("dynamic:{}", self.corruptor.describe())
    }
}

/// Fixed (erroneous -> correct) pairs as window-1 samples, reshuffled every
/// epoch. Used for the pair-extraction baseline.
pub struct PairBatches {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    vocab: CharVocab,
    batch_size: usize,
    seed: u64,
    fingerprint: u64,
}

impl PairBatches {
    pub fn new(pairs: &[ParallelPair], batch_size: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let vocab = CharVocab::standard();
        let mut bytes = Vec::new();
        let encoded = pairs
            .iter()
            .map(|p| {
                bytes.extend_from_slice(p.source.as_bytes());
                bytes.push(b'\t');
                bytes.extend_from_slice(p.target.as_bytes());
                bytes.push(b'\n');
                Ok((encode_label(&p.source, &vocab)?, encode_label(&p.target, &vocab)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pairs: encoded,
            vocab,
            batch_size,
            seed,
            fingerprint: rng::digest(&bytes),
        })
    }
}

impl BatchSource for PairBatches {
    fn epoch(&mut self, epoch: usize) -> Result<Vec<EncodedBatch>> {
        let order = shuffled(self.pairs.len(), self.seed, epoch);
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let src: Vec<Vec<usize>> = chunk.iter().map(|&i| self.pairs[i].0.clone()).collect();
                let tgt: Vec<Vec<usize>> = chunk.iter().map(|&i| self.pairs[i].1.clone()).collect();
                EncodedBatch::from_sequences(&src, &tgt)
            })
            .collect()
    }

    fn window(&self) -> Window {
        Window::new(1).expect("odd")
    }

    fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn describe(&self) -> String {
        "pairs".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::errorgen::Identity;

    fn words(s: &[&str]) -> Vec<String> {
        s.iter().map(|w| w.to_string()).collect()
    }

    fn sample(left: &[&str], target: &str, right: &[&str]) -> WindowSample {
        WindowSample {
            left: words(left),
            target_corrupted: target.into(),
            right: words(right),
            label: target.into(),
        }
    }

    #[test]
    fn vocabulary_layout() {
        let v = CharVocab::standard();
        assert_eq!(v.len(), 34);
        assert_eq!(v.symbol(PAD).unwrap(), "<pad>");
        assert_eq!(v.id_of('a').unwrap(), 5);
        assert_eq!(v.id_of('ö').unwrap(), 33);
        assert!(matches!(v.id_of('!'), Err(Error::NonAlphabetChar('!'))));
        assert!(matches!(v.char_of(34), Err(Error::UnknownId(34))));
    }

    #[test]
    fn window_five_example() {
        let v = CharVocab::standard();
        let s = sample(&["left", "context"], "farget", &["right", "context"]);
        let ids = encode_window(&s, Window::new(5).unwrap(), &v).unwrap();
        assert_eq!(
            v.render(&ids).unwrap(),
            "<sos> l e f t <sep> c o n t e x t <ctx> f a r g e t <ctx> r i g h t <sep> c o n t e x t <eos>"
        );
    }

    #[test]
    fn window_one_and_label_examples() {
        let v = CharVocab::standard();
        let ids = encode_window(&sample(&[], "farget", &[]), Window::new(1).unwrap(), &v).unwrap();
        assert_eq!(v.render(&ids).unwrap(), "<sos> f a r g e t <eos>");
        assert_eq!(
            v.render(&encode_label("target", &v).unwrap()).unwrap(),
            "<sos> t a r g e t <eos>"
        );
        assert_eq!(encode_label("", &v).unwrap(), vec![SOS, EOS]);
        assert_eq!(encode_label("äåö", &v).unwrap(), vec![SOS, 31, 32, 33, EOS]);
    }

    #[test]
    fn empty_side_collapses() {
        let v = CharVocab::standard();
        let ids = encode_window(&sample(&[], "abc", &["de"]), Window::new(3).unwrap(), &v).unwrap();
        assert_eq!(v.render(&ids).unwrap(), "<sos> <ctx> a b c <ctx> d e <eos>");
        assert!(encode_window(&sample(&[], "a-b", &[]), Window::new(3).unwrap(), &v).is_err());
    }

    #[test]
    fn decoding_stops_at_eos_and_skips_pads() {
        let v = CharVocab::standard();
        let mut ids = encode_label("kortti", &v).unwrap();
        ids.extend([PAD, PAD, 7, EOS]);
        assert_eq!(decode_ids(&ids, &v).unwrap(), "kortti");
        assert!(matches!(decode_ids(&[SOS, 99], &v), Err(Error::UnknownId(99))));
    }

    #[test]
    fn long_words_are_truncated() {
        let v = CharVocab::standard();
        let long = "a".repeat(40);
        assert_eq!(encode_label(&long, &v).unwrap().len(), MAX_WORD_CHARS + 2);
    }

    #[test]
    fn batches_per_epoch() {
        let s = TokenStream::from_tokens(words(&["aa", "bb", "cc"])).unwrap();
        let mut l = make_batches(&s, Window::new(1).unwrap(), &Identity, 1, 3).unwrap();
        let e = l.epoch(0).unwrap();
        assert_eq!(e.len(), 3);
        assert!(make_batches(&TokenStream::default(), Window::new(1).unwrap(), &Identity, 1, 3).is_err());
        assert!(make_batches(&s, Window::new(1).unwrap(), &Identity, 0, 3).is_err());
    }

    #[test]
    fn identity_corruptor_gives_clean_sources() {
        let s = TokenStream::from_tokens(words(&["talo", "on", "iso"])).unwrap();
        let w = Window::new(1).unwrap();
        let mut l = make_batches(&s, w, &Identity, 2, 3).unwrap();
        for b in l.epoch(0).unwrap() {
            for i in 0..b.batch {
                let src: Vec<usize> = b.source_row(i).iter().copied().filter(|&t| t != PAD).collect();
                let lab: Vec<usize> = b.label_row(i).iter().copied().filter(|&t| t != PAD).collect();
                assert_eq!(src, lab);
            }
        }
    }

    #[test]
    fn pair_batches_cover_all_pairs() {
        let pairs = vec![ParallelPair::new("jokl", "joki"), ParallelPair::new("taio", "talo")];
        let mut p = PairBatches::new(&pairs, 8, 1).unwrap();
        let e = p.epoch(0).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].batch, 2);
        assert!(PairBatches::new(&[], 8, 1).is_err());
    }
}
