//! Unsupervised extraction of (erroneous, correct) word pairs from
//! embedding neighborhoods.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Alphabet;
use crate::embedding::NeighborSource;
use crate::error::{Error, Result};
use crate::lexicon::{levenshtein, Lexicon};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParallelPair {
    /// Erroneous form.
    pub source: String,
    /// Correct form.
    pub target: String,
}

impl ParallelPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }

    /// The same pair with source and target swapped.
    pub fn reversed(&self) -> Self {
        Self::new(self.target.clone(), self.source.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub neighbors_k: usize,
    pub max_edit_distance: usize,
    pub min_word_len: usize,
    /// Pair errors only with the anchor word instead of with every correct
    /// neighbor.
    pub anchor_only: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            neighbors_k: 10,
            max_edit_distance: 4,
            min_word_len: 3,
            anchor_only: false,
        }
    }
}

/// Vocabulary words accepted by the lexicon.
pub fn build_correct_list(model: &dyn NeighborSource, lex: &Lexicon) -> BTreeSet<String> {
    model.vocabulary().into_iter().filter(|w| lex.is_valid(w)).collect()
}

/// For every anchor in `correct`, splits its nearest neighbors into correct
/// (lexicon-valid, plus the anchor) and erroneous words, and pairs each
/// erroneous word with each correct one within `max_edit_distance`.
/// Output order is deterministic and duplicates are removed.
pub fn extract_pairs(
    model: &dyn NeighborSource,
    correct: &BTreeSet<String>,
    lex: &Lexicon,
    cfg: &ExtractionConfig,
) -> Result<Vec<ParallelPair>> {
    if correct.is_empty() {
        return Err(Error::EmptyCorrectList);
    }
    if cfg.neighbors_k == 0 || cfg.max_edit_distance == 0 {
        return Err(Error::InvalidConfig(format!(
            "neighbors_k and max_edit_distance must be at least 1: {cfg:?}"
        )));
    }
    let long_enough = |w: &str| w.chars().count() >= cfg.min_word_len;
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for anchor in correct.iter().filter(|w| long_enough(w)) {
        let neighbors = model.neighbors(anchor, cfg.neighbors_k)?;
        let mut good = vec![anchor.clone()];
        let mut bad = Vec::new();
        for (n, _) in neighbors {
            if !long_enough(&n) || n == *anchor {
                continue;
            }
            if lex.is_valid(&n) {
                if !cfg.anchor_only {
                    good.push(n);
                }
            } else {
                bad.push(n);
            }
        }
        for e in &bad {
            for c in &good {
                if e != c && levenshtein(e, c) <= cfg.max_edit_distance {
                    let pair = ParallelPair::new(e.clone(), c.clone());
                    if seen.insert(pair.clone()) {
                        pairs.push(pair);
                    }
                }
            }
        }
    }
    Ok(pairs)
}

/// `source<TAB>target` lines.
pub fn format_pairs(pairs: &[ParallelPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        writeln!(out, "{}\t{}", p.source, p.target).expect("string write");
    }
    out
}

/// Parses a pairs file. Both sides must be alphabet-only and distinct.
pub fn parse_pairs(text: &str, source: &str, alphabet: &Alphabet) -> Result<Vec<ParallelPair>> {
    let mut pairs = Vec::new();
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
        let (Some(s), Some(t), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(malformed("expected two tab-separated fields"));
        };
        let (s, t) = (s.trim(), t.trim());
        if !alphabet.is_word(s) || !alphabet.is_word(t) {
            return Err(malformed("words must be nonempty and alphabet-only"));
        }
        if s == t {
            return Err(malformed("source equals target"));
        }
        pairs.push(ParallelPair::new(s, t));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::NeighborTable;

    fn lex(words: &[&str]) -> Lexicon {
        Lexicon::from_words(words, "test", &Alphabet::finnish()).unwrap()
    }

    #[test]
    fn correct_list_is_vocab_intersection() {
        let t = NeighborTable::parse("joki\tjokl\t0.9\njoki\ttie\t0.5\n", "n").unwrap();
        let c = build_correct_list(&t, &lex(&["joki", "tie"]));
        assert_eq!(c.into_iter().collect::<Vec<_>>(), vec!["joki", "tie"]);
        assert!(build_correct_list(&t, &lex(&["talo"])).is_empty());
    }

    #[test]
    fn cartesian_pairing_within_distance() {
        let t = NeighborTable::parse("jokeen\tjoleen\t0.9\njokeen\ttiehen\t0.8\njokeen\tasfaltti\t0.7\n", "n").unwrap();
        let l = lex(&["jokeen", "tiehen"]);
        let correct: BTreeSet<String> = ["jokeen".to_string()].into();
        let pairs = extract_pairs(&t, &correct, &l, &ExtractionConfig::default()).unwrap();
        assert_eq!(
            pairs,
            vec![
                ParallelPair::new("joleen", "jokeen"),
                ParallelPair::new("joleen", "tiehen")
            ]
        );
        let anchor = ExtractionConfig {
            anchor_only: true,
            ..Default::default()
        };
        let pairs = extract_pairs(&t, &correct, &l, &anchor).unwrap();
        assert_eq!(pairs, vec![ParallelPair::new("joleen", "jokeen")]);
    }

    #[test]
    fn all_valid_neighbors_yield_nothing() {
        let t = NeighborTable::parse("talo\ttalot\t0.9\n", "n").unwrap();
        let l = lex(&["talo", "talot"]);
        let correct = build_correct_list(&t, &l);
        assert!(extract_pairs(&t, &correct, &l, &ExtractionConfig::default())
            .unwrap()
            .is_empty());
        assert!(matches!(
            extract_pairs(&t, &BTreeSet::new(), &l, &ExtractionConfig::default()),
            Err(Error::EmptyCorrectList)
        ));
    }

    #[test]
    fn pairs_file_round_trip_and_errors() {
        let a = Alphabet::finnish();
        let pairs = vec![ParallelPair::new("jokl", "joki"), ParallelPair::new("wäki", "väki")];
        assert_eq!(parse_pairs(&format_pairs(&pairs), "p", &a).unwrap(), pairs);
        assert!(matches!(
            parse_pairs("a\n", "p", &a),
            Err(Error::Malformed { line: 1, .. })
        ));
        assert!(parse_pairs("a\ta\n", "p", &a).is_err());
        assert!(parse_pairs("a1\tb\n", "p", &a).is_err());
    }
}
