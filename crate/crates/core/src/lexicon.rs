//! Word-validity oracle and edit distance.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::warn;

use crate::corpus::Alphabet;
use crate::error::{Error, Result};

/// Set of known-correct surface forms.
///
/// Stands in for a morphological analyzer: inflected forms are only
/// recognized when listed explicitly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<String>,
    source: String,
    /// Input lines rejected by alphabet filtering.
    pub rejected: usize,
}

impl Lexicon {
    /// Builds a lexicon, lowercasing entries and dropping those with
    /// non-alphabet characters.
    pub fn from_words<I, S>(words: I, source: impl Into<String>, alphabet: &Alphabet) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let source = source.into();
        let mut set = HashSet::new();
        let mut rejected = 0;
        for w in words {
            let w = w.as_ref().trim();
            if w.is_empty() {
                continue;
            }
            let lower = w.to_lowercase();
            if alphabet.is_word(&lower) {
                set.insert(lower);
            } else {
                rejected += 1;
            }
        }
        if set.is_empty() {
            return Err(Error::EmptyLexicon(source));
        }
        if rejected > 0 {
            warn!("{source}: dropped {rejected} entries with non-alphabet characters");
        }
        Ok(Self {
            words: set,
            source,
            rejected,
        })
    }

    pub fn is_valid(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Entries in sorted order.
    pub fn sorted_words(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.words.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

/// Reads a one-word-per-line UTF-8 wordlist.
pub fn load_wordlist(path: &Path, alphabet: &Alphabet) -> Result<Lexicon> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_wordlist(&raw, &path.display().to_string(), alphabet)
}

pub fn parse_wordlist(raw: &str, source: &str, alphabet: &Alphabet) -> Result<Lexicon> {
    Lexicon::from_words(raw.lines(), source, alphabet)
}

/// Minimum number of single-character insertions, deletions and
/// substitutions turning `a` into `b`, counted over Unicode scalars.
///
/// O(|a|·|b|) time, O(min(|a|, |b|)) space.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (short, long) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0; short.len() + 1];
    for (j, &lc) in long.iter().enumerate() {
        cur[0] = j + 1;
        for (i, &sc) in short.iter().enumerate() {
            let sub = prev[i] + usize::from(sc != lc);
            cur[i + 1] = sub.min(prev[i + 1] + 1).min(cur[i] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}
