//! Token-stream correction with a trained transformer.

use std::collections::HashMap;

use ocrrestore_neural::{Graph, Tensor};
use rayon::prelude::*;

use super::beam::{beam_search, masked_log_softmax, Scorer};
use super::transformer::gather_rows;
use super::{ModelKind, Seq2SeqModel};
use crate::corpus::{sliding_windows, TokenStream, Window};
use crate::encoding::{decode_ids, encode_window, EncodedBatch, MAX_WORD_CHARS, PAD};
use crate::error::{Error, Result};

pub const DEFAULT_BEAM: usize = 3;
/// Windows decoded together in one lockstep beam search.
const CHUNK: usize = 64;
/// Extra symbols a correction may have beyond its input word.
const LENGTH_SLACK: usize = 4;

/// Anything that maps an OCR token stream to a corrected one of equal length.
pub trait Corrector: Sync {
    fn window(&self) -> Window;
    fn correct(&self, stream: &TokenStream) -> Result<TokenStream>;
    fn describe(&self) -> String;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityCorrector(pub Window);

impl Corrector for IdentityCorrector {
    fn window(&self) -> Window {
        self.0
    }

    fn correct(&self, stream: &TokenStream) -> Result<TokenStream> {
        Ok(stream.clone())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// A trained corrector decoded with beam search.
pub struct BeamCorrector<'m> {
    pub model: &'m Seq2SeqModel,
    pub beam: usize,
}

impl<'m> BeamCorrector<'m> {
    pub fn new(model: &'m Seq2SeqModel, beam: usize) -> Result<Self> {
        model.expect_kind(ModelKind::TransformerCorrector)?;
        Window::new(model.manifest().window)?;
        Ok(Self { model, beam })
    }
}

impl Corrector for BeamCorrector<'_> {
    fn window(&self) -> Window {
        Window::new(self.model.manifest().window).expect("checked at construction")
    }

    fn correct(&self, stream: &TokenStream) -> Result<TokenStream> {
        correct_tokens_with(self.model, stream, self.window(), self.beam)
    }

    fn describe(&self) -> String {
        format!("transformer(window={}, beam={})", self.window(), self.beam)
    }
}

/// Decoder scores for a batch of encoded sources; letters and `<eos>` only.
pub struct TransformerScorer<'m> {
    model: &'m Seq2SeqModel,
    memory: Tensor<f32>,
    src_pad: Vec<Vec<bool>>,
    allowed: Vec<bool>,
}

impl<'m> TransformerScorer<'m> {
    pub fn new(model: &'m Seq2SeqModel, sources: &[Vec<usize>]) -> Result<Self> {
        let net = model.transformer()?;
        let batch = EncodedBatch::from_sequences(sources, sources)?;
        let mut g = Graph::new(model.store());
        let memory = net.encode(&mut g, &batch.sources, batch.batch, batch.src_len)?;
        Ok(Self {
            model,
            memory: g.value(memory).clone(),
            src_pad: batch.source_pad_mask(),
            allowed: model.output_mask(),
        })
    }
}

impl Scorer for TransformerScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.allowed.len()
    }

    fn next_log_probs(&mut self, requests: &[(usize, &[usize])]) -> Result<Vec<Vec<f64>>> {
        let net = self.model.transformer()?;
        let t = requests.iter().map(|(_, p)| p.len()).max().unwrap_or(1);
        let rows: Vec<usize> = requests.iter().map(|&(i, _)| i).collect();
        let mut ids = Vec::with_capacity(requests.len() * t);
        for (_, p) in requests {
            ids.extend_from_slice(p);
            ids.extend(std::iter::repeat_n(PAD, t - p.len()));
        }
        let pads: Vec<Vec<bool>> = rows.iter().map(|&r| self.src_pad[r].clone()).collect();
        let mut g = Graph::new(self.model.store());
        let memory = g.constant(gather_rows(&self.memory, &rows))?;
        let logits = net.decode(&mut g, memory, &pads, &ids, requests.len(), t)?;
        let v = self.allowed.len();
        let data = g.value(logits).data();
        Ok(requests
            .iter()
            .enumerate()
            .map(|(i, (_, p))| {
                let off = (i * t + p.len() - 1) * v;
                masked_log_softmax(&data[off..off + v], &self.allowed)
            })
            .collect())
    }
}

/// Beam-decodes each encoded source; returns the decoded words in order.
pub fn decode_sources(
    model: &Seq2SeqModel,
    sources: &[Vec<usize>],
    max_len: &[usize],
    beam: usize,
) -> Result<Vec<String>> {
    let mut scorer = TransformerScorer::new(model, sources)?;
    beam_search(&mut scorer, beam, max_len)?
        .into_iter()
        .map(|h| decode_ids(&h.ids, model.vocab()))
        .collect()
}

/// Corrects every token of `stream` from its window, with beam width 3.
pub fn correct_tokens(model: &Seq2SeqModel, stream: &TokenStream, window: Window) -> Result<TokenStream> {
    correct_tokens_with(model, stream, window, DEFAULT_BEAM)
}

/// Identical windows are decoded once. Chunks run in parallel and are
/// reassembled in input order, so the result does not depend on the number
/// of threads.
pub fn correct_tokens_with(
    model: &Seq2SeqModel,
    stream: &TokenStream,
    window: Window,
    beam: usize,
) -> Result<TokenStream> {
    model.expect_kind(ModelKind::TransformerCorrector)?;
    let trained = model.manifest().window;
    if trained != window.size() {
        return Err(Error::WindowMismatch {
            trained,
            requested: window.size(),
        });
    }
    if stream.is_empty() {
        return Ok(stream.clone());
    }
    let samples = sliding_windows(stream, window);
    let mut unique: Vec<Vec<usize>> = Vec::new();
    let mut lengths = Vec::new();
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut slot = Vec::with_capacity(samples.len());
    for s in &samples {
        let ids = encode_window(s, window, model.vocab())?;
        let next = unique.len();
        let i = *index.entry(ids.clone()).or_insert(next);
        if i == next {
            unique.push(ids);
            lengths.push(s.target_corrupted.chars().count().min(MAX_WORD_CHARS) + LENGTH_SLACK);
        }
        slot.push(i);
    }
    let chunks: Vec<(&[Vec<usize>], &[usize])> = unique.chunks(CHUNK).zip(lengths.chunks(CHUNK)).collect();
    let decoded: Vec<Vec<String>> = chunks
        .par_iter()
        .map(|(src, len)| decode_sources(model, src, len, beam))
        .collect::<Result<_>>()?;
    let decoded: Vec<String> = decoded.into_iter().flatten().collect();
    let tokens = samples
        .iter()
        .zip(&slot)
        .map(|(s, &i)| {
            if decoded[i].is_empty() {
                s.target_corrupted.clone()
            } else {
                decoded[i].clone()
            }
        })
        .collect();
    stream.with_tokens(tokens)
}
