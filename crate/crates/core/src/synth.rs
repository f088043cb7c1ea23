//! Synthetic Finnish-like corpora for demonstrations and tests.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::TokenStream;
use crate::error::Result;
use crate::errorgen::ConfusionChannel;
use crate::rng;

const ONSETS: [&str; 14] = ["k", "t", "s", "l", "v", "n", "m", "p", "h", "r", "j", "v", "n", "nn"];
const VOWELS: [&str; 10] = ["a", "i", "o", "u", "e", "ä", "i", "ai", "ii", "y"];
const CODAS: [&str; 6] = ["", "", "n", "s", "l", "t"];

/// Markov-chain text over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguage {
    pub words: Vec<String>,
    /// Allowed successors of each word, by index.
    pub successors: Vec<Vec<usize>>,
}

impl SyntheticLanguage {
    /// `size` distinct words of two or three syllables. No word can be
    /// turned into another by the substitutions of `channel`.
    pub fn generate(size: usize, successors: usize, channel: &[(char, char)], seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x5e17]);
        let mut words: Vec<String> = Vec::with_capacity(size);
        let mut seen = HashSet::new();
        let mut blocked = HashSet::new();
        while words.len() < size {
            let syllables = r.gen_range(2..=3);
            let mut w = String::new();
            for i in 0..syllables {
                w.push_str(ONSETS.choose(&mut r).unwrap());
                w.push_str(VOWELS.choose(&mut r).unwrap());
                if i + 1 == syllables {
                    w.push_str(CODAS.choose(&mut r).unwrap());
                }
            }
            let n = w.chars().count();
            if !(4..=9).contains(&n) || seen.contains(&w) || blocked.contains(&w) {
                continue;
            }
            let variants = confusion_variants(&w, channel);
            if variants.iter().any(|v| seen.contains(v)) {
                continue;
            }
            seen.insert(w.clone());
            blocked.extend(variants);
            words.push(w);
        }
        let successors = (0..size)
            .map(|_| {
                let mut idx: Vec<usize> = (0..size).collect();
                idx.shuffle(&mut r);
                idx.truncate(successors.max(1));
                idx
            })
            .collect();
        Self { words, successors }
    }

    /// `docs` documents of `doc_len` words each.
    pub fn sample(&self, docs: usize, doc_len: usize, seed: u64) -> Result<TokenStream> {
        let mut r = rng::stream(seed, &[0x7e47]);
        let mut out = Vec::with_capacity(docs);
        for _ in 0..docs {
            let mut cur = r.gen_range(0..self.words.len());
            let mut doc = Vec::with_capacity(doc_len);
            for _ in 0..doc_len {
                doc.push(self.words[cur].clone());
                cur = *self.successors[cur].choose(&mut r).unwrap();
            }
            out.push(doc);
        }
        TokenStream::from_documents(out)
    }
}

/// Every word reachable by applying any subset of the substitutions,
/// excluding `word` itself.
pub fn confusion_variants(word: &str, channel: &[(char, char)]) -> HashSet<String> {
    let mut out: HashSet<String> = HashSet::from([word.to_string()]);
    for (i, c) in word.chars().enumerate() {
        for &(from, to) in channel {
            if c == from {
                let extra: Vec<String> = out
                    .iter()
                    .map(|v| {
                        v.chars()
                            .enumerate()
                            .map(|(j, x)| if j == i { to } else { x })
                            .collect()
                    })
                    .collect();
                out.extend(extra);
            }
        }
    }
    out.remove(word);
    out
}

/// Applies `channel` to every token, one stream per call.
pub fn corrupt_stream(stream: &TokenStream, channel: &ConfusionChannel, seed: u64) -> Result<TokenStream> {
    let mut r = rng::stream(seed, &[rng::CORRUPT]);
    stream.with_tokens(stream.tokens().iter().map(|t| channel.apply(t, &mut r)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_unambiguous_under_the_channel() {
        let ch = [('i', 'l'), ('v', 'w'), ('n', 'u')];
        let lang = SyntheticLanguage::generate(200, 4, &ch, 7);
        let vocab: HashSet<&String> = lang.words.iter().collect();
        assert_eq!(vocab.len(), 200);
        for w in &lang.words {
            assert!(confusion_variants(w, &ch).iter().all(|v| !vocab.contains(v)));
        }
        let text = lang.sample(3, 10, 1).unwrap();
        assert_eq!(text.len(), 30);
        assert_eq!(lang, SyntheticLanguage::generate(200, 4, &ch, 7));
    }

    #[test]
    fn variants_of_a_short_word() {
        let v = confusion_variants("iv", &[('i', 'l'), ('v', 'w')]);
        let mut v: Vec<_> = v.into_iter().collect();
        v.sort();
        assert_eq!(v, vec!["iw", "lv", "lw"]);
    }
}
