//! Skip-gram with negative sampling, and nearest-neighbor queries.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub min_count: usize,
    /// Initial learning rate, decayed linearly towards zero.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            min_count: 5,
            learning_rate: 0.025,
            seed: 1,
        }
    }
}

impl SgnsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.negatives < 1 || self.min_count < 1 || self.window < 1 {
            return Err(Error::InvalidConfig(format!(
                "sgns needs dim >= 2, negatives >= 1, min_count >= 1, window >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Anything that can list a vocabulary and rank neighbors of its words.
pub trait NeighborSource {
    fn vocabulary(&self) -> Vec<String>;
    /// Up to `k` most similar words, best first, excluding `word` itself.
    fn neighbors(&self, word: &str, k: usize) -> Result<Vec<(String, f64)>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    words: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
    dim: usize,
    /// Row-major `|V| x dim`.
    vectors: Vec<f32>,
    /// Mean loss per training pair, one entry per epoch.
    pub loss_history: Vec<f64>,
}

impl EmbeddingModel {
    /// Assembles a model from explicit rows (e.g. loaded from disk).
    pub fn from_parts(words: Vec<String>, counts: Vec<u64>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::EmptyVocabulary { min_count: 0 });
        }
        if vectors.len() != words.len() * dim || counts.len() != words.len() {
            return Err(Error::LengthMismatch(format!(
                "{} words, {} counts, {} values for dim {dim}",
                words.len(),
                counts.len(),
                vectors.len()
            )));
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::InvalidConfig("duplicate vocabulary entries".into()));
        }
        let model = Self {
            words,
            index,
            counts,
            dim,
            vectors,
            loss_history: Vec::new(),
        };
        for i in 0..model.words.len() {
            let n = model.norm(i);
            if !n.is_finite() || n <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "vector of {:?} has norm {n}",
                    model.words[i]
                )));
            }
        }
        Ok(model)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn norm(&self, i: usize) -> f64 {
        self.vector(i)
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cosine(&self, a: &str, b: &str) -> Result<f64> {
        let ia = self.index_of(a).ok_or_else(|| Error::UnknownWord(a.into()))?;
        let ib = self.index_of(b).ok_or_else(|| Error::UnknownWord(b.into()))?;
        Ok(self.cosine_idx(ia, ib))
    }

    fn cosine_idx(&self, a: usize, b: usize) -> f64 {
        let dot: f64 = self
            .vector(a)
            .iter()
            .zip(self.vector(b))
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        (dot / (self.norm(a) * self.norm(b))).clamp(-1.0, 1.0)
    }

    /// Top-`k` words by cosine similarity, excluding the query; ties go to the
    /// lower vocabulary index.
    pub fn most_similar(&self, word: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let q = self.index_of(word).ok_or_else(|| Error::UnknownWord(word.into()))?;
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.words.len())
            .filter(|&i| i != q)
            .map(|i| (i, self.cosine_idx(q, i)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored.into_iter().map(|(i, s)| (self.words[i].clone(), s)).collect())
    }

    /// Neighbor table text: `word<TAB>neighbor<TAB>score`, `k` lines per word.
    pub fn export_neighbors(&self, k: usize) -> Result<String> {
        let mut out = String::new();
        for w in &self.words {
            for (n, s) in self.most_similar(w, k)? {
                writeln!(out, "{w}\t{n}\t{s:.6}").expect("string write");
            }
        }
        Ok(out)
    }
}

impl NeighborSource for EmbeddingModel {
    fn vocabulary(&self) -> Vec<String> {
        self.words.clone()
    }

    fn neighbors(&self, word: &str, k: usize) -> Result<Vec<(String, f64)>> {
        self.most_similar(word, k)
    }
}

/// Precomputed neighbor lists, e.g. exported from an external embedding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborTable {
    order: Vec<String>,
    lists: HashMap<String, Vec<(String, f64)>>,
}

impl NeighborTable {
    /// Parses `word<TAB>neighbor<TAB>score` lines. Blank lines are ignored.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut table = NeighborTable::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: &str| Error::Malformed {
                path: source.to_string(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut fields = line.split('\t');
            let (Some(w), Some(n), Some(s), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
                return Err(malformed("expected three tab-separated fields"));
            };
            let score: f64 = s.trim().parse().map_err(|_| malformed("score is not a number"))?;
            if !score.is_finite() {
                return Err(malformed("score is not finite"));
            }
            let (w, n) = (w.trim(), n.trim());
            if w.is_empty() || n.is_empty() {
                return Err(malformed("empty word"));
            }
            if w == n {
                continue;
            }
            for word in [w, n] {
                if !table.lists.contains_key(word) {
                    table.order.push(word.to_string());
                    table.lists.insert(word.to_string(), Vec::new());
                }
            }
            table.lists.get_mut(w).unwrap().push((n.to_string(), score));
        }
        for list in table.lists.values_mut() {
            list.sort_by(|a, b| b.1.total_cmp(&a.1));
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl NeighborSource for NeighborTable {
    fn vocabulary(&self) -> Vec<String> {
        self.order.clone()
    }

    fn neighbors(&self, word: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let list = self.lists.get(word).ok_or_else(|| Error::UnknownWord(word.into()))?;
        Ok(list.iter().take(k).cloned().collect())
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trains skip-gram vectors with `cfg.negatives` noise words drawn from the
/// unigram distribution raised to 0.75. Deterministic given `cfg.seed`.
pub fn train_sgns(stream: &TokenStream, cfg: &SgnsConfig) -> Result<EmbeddingModel> {
    cfg.validate()?;
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for t in stream.tokens() {
        *freq.entry(t.as_str()).or_default() += 1;
    }
    let mut vocab: Vec<(&str, u64)> = freq.into_iter().filter(|&(_, c)| c >= cfg.min_count as u64).collect();
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary {
            min_count: cfg.min_count,
        });
    }
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let words: Vec<String> = vocab.iter().map(|(w, _)| w.to_string()).collect();
    let counts: Vec<u64> = vocab.iter().map(|&(_, c)| c).collect();
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, (w, _))| (*w, i)).collect();

    let mut noise_cdf = Vec::with_capacity(counts.len());
    let mut acc = 0.0f64;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        noise_cdf.push(acc);
    }
    let noise_total = acc;

    let docs: Vec<Vec<usize>> = stream
        .documents()
        .map(|r| {
            stream.tokens()[r]
                .iter()
                .filter_map(|t| index.get(t.as_str()).copied())
                .collect()
        })
        .collect();
    let in_vocab: usize = docs.iter().map(Vec::len).sum();

    let (v, d) = (words.len(), cfg.dim);
    let mut init = rng::stream(cfg.seed, &[rng::SGNS, rng::INIT]);
    let bound = 0.5 / d as f32;
    let mut input: Vec<f32> = (0..v * d).map(|_| init.gen_range(-bound..bound)).collect();
    let mut output = vec![0.0f32; v * d];

    let total_steps = (cfg.epochs * in_vocab).max(1) as f64;
    let mut step = 0usize;
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0f32; d];
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[rng::SGNS, epoch as u64 + 1]);
        let mut loss = 0.0f64;
        let mut pairs = 0usize;
        for doc in &docs {
            for (i, &center) in doc.iter().enumerate() {
                let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4)) as f32;
                step += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(doc.len());
                for (j, &ctx) in doc.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let vc = center * d;
                    for s in 0..=cfg.negatives {
                        let (target, label) = if s == 0 {
                            (ctx, 1.0f32)
                        } else {
                            let u = r.gen::<f64>() * noise_total;
                            let n = noise_cdf.partition_point(|&c| c <= u).min(v - 1);
                            if n == ctx {
                                continue;
                            }
                            (n, 0.0)
                        };
                        let ot = target * d;
                        let dot: f32 = (0..d).map(|k| input[vc + k] * output[ot + k]).sum();
                        let p = sigmoid(dot);
                        let pl = if label > 0.5 { p } else { 1.0 - p };
                        loss -= (pl.max(1e-7) as f64).ln();
                        let g = (label - p) * lr;
                        for k in 0..d {
                            grad[k] += g * output[ot + k];
                            output[ot + k] += g * input[vc + k];
                        }
                    }
                    for k in 0..d {
                        input[vc + k] += grad[k];
                    }
                    pairs += 1;
                }
            }
        }
        loss_history.push(if pairs == 0 { 0.0 } else { loss / pairs as f64 });
    }

    let mut model = EmbeddingModel::from_parts(words, counts, d, input)?;
    model.loss_history = loss_history;
    Ok(model)
}
