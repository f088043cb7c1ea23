//! Text ingestion: alphabet filtering, tokenization, ground-truth tables and
//! context windows.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

pub const FINNISH_LETTERS: &str = "abcdefghijklmnopqrstuvwxyzäåö";

/// Ordered set of lowercase letters a word may contain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    letters: Vec<char>,
}

impl Alphabet {
    pub fn finnish() -> Self {
        Self {
            letters: FINNISH_LETTERS.chars().collect(),
        }
    }

    pub fn letters(&self) -> &[char] {
        &self.letters
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index_of(c).is_some()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.letters.iter().position(|&l| l == c)
    }

    /// True when `word` is nonempty and made only of alphabet letters.
    pub fn is_word(&self, word: &str) -> bool {
        !word.is_empty() && word.chars().all(|c| self.contains(c))
    }

    /// Lowercases `word` and deletes every character outside the alphabet.
    pub fn clean_word(&self, word: &str) -> String {
        word.chars()
            .flat_map(char::to_lowercase)
            .filter(|&c| self.contains(c))
            .collect()
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::finnish()
    }
}

/// Alphabet-only tokens with document boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    tokens: Vec<String>,
    /// Exclusive end index of every document, strictly increasing; the last
    /// one equals `tokens.len()`.
    doc_boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn new(tokens: Vec<String>, doc_boundaries: Vec<usize>) -> Result<Self> {
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidConfig("token stream contains an empty token".into()));
        }
        let increasing = doc_boundaries.windows(2).all(|w| w[0] < w[1]);
        let in_range = doc_boundaries.last().is_none_or(|&b| b <= tokens.len());
        if !increasing || !in_range || doc_boundaries.first() == Some(&0) {
            return Err(Error::InvalidConfig(format!(
                "invalid document boundaries {doc_boundaries:?} for {} tokens",
                tokens.len()
            )));
        }
        let mut doc_boundaries = doc_boundaries;
        if !tokens.is_empty() && doc_boundaries.last() != Some(&tokens.len()) {
            doc_boundaries.push(tokens.len());
        }
        Ok(Self { tokens, doc_boundaries })
    }

    /// A single-document stream.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let n = tokens.len();
        Self::new(tokens, if n == 0 { vec![] } else { vec![n] })
    }

    pub fn from_documents(docs: Vec<Vec<String>>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut bounds = Vec::new();
        for doc in docs.into_iter().filter(|d| !d.is_empty()) {
            tokens.extend(doc);
            bounds.push(tokens.len());
        }
        Self::new(tokens, bounds)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn doc_boundaries(&self) -> &[usize] {
        &self.doc_boundaries
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token index ranges of the documents, in order.
    pub fn documents(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.doc_boundaries.iter().copied());
        starts.zip(self.doc_boundaries.iter().copied()).map(|(s, e)| s..e)
    }

    /// Same boundaries, new tokens (one per existing token).
    pub fn with_tokens(&self, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() != self.tokens.len() {
            return Err(Error::LengthMismatch(format!(
                "{} replacement tokens for a stream of {}",
                tokens.len(),
                self.tokens.len()
            )));
        }
        Self::new(tokens, self.doc_boundaries.clone())
    }

    /// Text form: one document per line, tokens separated by spaces,
    /// documents separated by a blank line. Reading it back with
    /// [`clean_text`] yields the same stream.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, doc) in self.documents().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&self.tokens[doc].join(" "));
            out.push('\n');
        }
        out
    }
}

/// Lowercases, deletes non-alphabet characters in place and splits on
/// whitespace. Blank lines separate documents.
pub fn clean_text(raw: &str, alphabet: &Alphabet) -> TokenStream {
    let mut docs: Vec<Vec<String>> = vec![Vec::new()];
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !docs.last().unwrap().is_empty() {
                docs.push(Vec::new());
            }
            continue;
        }
        let doc = docs.last_mut().unwrap();
        doc.extend(
            line.split_whitespace()
                .map(|w| alphabet.clean_word(w))
                .filter(|w| !w.is_empty()),
        );
    }
    TokenStream::from_documents(docs).expect("cleaned tokens are valid")
}

pub fn read_corpus(path: &Path, alphabet: &Alphabet) -> Result<TokenStream> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(clean_text(&raw, alphabet))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Engine {
    Tesseract,
    Old,
    Fr11,
}

impl Engine {
    pub const ALL: [Engine; 3] = [Engine::Tesseract, Engine::Old, Engine::Fr11];

    pub fn name(self) -> &'static str {
        match self {
            Engine::Tesseract => "TESSERACT",
            Engine::Old => "OLD",
            Engine::Fr11 => "FR11",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name().eq_ignore_ascii_case(s.trim()))
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One ground-truth word with the three engines' readings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedRow {
    pub gt: String,
    ocr: [String; 3],
}

impl AlignedRow {
    pub fn new(
        gt: impl Into<String>,
        tesseract: impl Into<String>,
        old: impl Into<String>,
        fr11: impl Into<String>,
    ) -> Self {
        Self {
            gt: gt.into(),
            ocr: [tesseract.into(), old.into(), fr11.into()],
        }
    }

    pub fn ocr(&self, engine: Engine) -> &str {
        &self.ocr[engine.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedRow {
    pub line: usize,
    pub reason: String,
}

/// Filtered contents of a ground-truth table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GtTable {
    pub rows: Vec<AlignedRow>,
    /// Rows with the wrong number of fields, skipped.
    pub malformed: Vec<MalformedRow>,
    pub dropped_blank: usize,
    pub dropped_non_alphabet: usize,
}

impl GtTable {
    /// Ground truth and one engine's readings as two aligned single-document
    /// streams.
    pub fn streams(&self, engine: Engine) -> (TokenStream, TokenStream) {
        let gt = self.rows.iter().map(|r| r.gt.clone()).collect();
        let ocr = self.rows.iter().map(|r| r.ocr(engine).to_string()).collect();
        (
            TokenStream::from_tokens(gt).expect("filtered rows are nonempty"),
            TokenStream::from_tokens(ocr).expect("filtered rows are nonempty"),
        )
    }
}

pub fn load_gt_table(path: &Path, delimiter: u8, alphabet: &Alphabet) -> Result<GtTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_gt_table(file, delimiter, alphabet)
}

/// Parses a delimiter-separated table whose header names the columns `GT`,
/// `TESSERACT`, `OLD` and `FR11` (any order, other columns ignored).
///
/// Rows with a blank cell or a cell containing a non-alphabet character
/// (after lowercasing) are dropped; rows with the wrong field count are
/// reported in [`GtTable::malformed`] and skipped.
pub fn parse_gt_table<R: Read>(reader: R, delimiter: u8, alphabet: &Alphabet) -> Result<GtTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Table(format!("unreadable header: {e}")))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Table(format!("header lacks a {name} column")))
    };
    let gt_col = find("GT")?;
    let engine_cols = [find("TESSERACT")?, find("OLD")?, find("FR11")?];

    let mut table = GtTable::default();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position().map(|p| p.line() as usize))
            .unwrap_or(i + 2);
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                table.malformed.push(MalformedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if record.len() != headers.len() {
            table.malformed.push(MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        let cells: Vec<String> = std::iter::once(gt_col)
            .chain(engine_cols)
            .map(|c| record[c].trim().to_lowercase())
            .collect();
        if cells.iter().any(|c| c.is_empty()) {
            table.dropped_blank += 1;
            continue;
        }
        if !cells.iter().all(|c| alphabet.is_word(c)) {
            table.dropped_non_alphabet += 1;
            continue;
        }
        let [gt, tess, old, fr11]: [String; 4] = cells.try_into().expect("four cells");
        table.rows.push(AlignedRow::new(gt, tess, old, fr11));
    }
    if !table.malformed.is_empty() {
        warn!("skipped {} malformed table rows", table.malformed.len());
    }
    Ok(table)
}

/// Odd, positive window size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window(usize);

impl Window {
    pub fn new(n: usize) -> Result<Self> {
        if n % 2 == 1 {
            Ok(Self(n))
        } else {
            Err(Error::EvenWindow(n))
        }
    }

    pub fn size(self) -> usize {
        self.0
    }

    /// Context words on each side.
    pub fn half(self) -> usize {
        self.0 / 2
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A target word with its surrounding context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSample {
    pub left: Vec<String>,
    /// The word fed to the model (possibly corrupted).
    pub target_corrupted: String,
    pub right: Vec<String>,
    /// The clean form of the target.
    pub label: String,
}

/// One sample per token, with up to `n / 2` context words on each side that
/// never cross a document boundary. The target doubles as the label.
pub fn sliding_windows(stream: &TokenStream, n: Window) -> Vec<WindowSample> {
    let half = n.half();
    let tokens = stream.tokens();
    let mut out = Vec::with_capacity(tokens.len());
    for doc in stream.documents() {
        for i in doc.clone() {
            let lo = i.saturating_sub(half).max(doc.start);
            let hi = (i + 1 + half).min(doc.end);
            out.push(WindowSample {
                left: tokens[lo..i].to_vec(),
                target_corrupted: tokens[i].clone(),
                right: tokens[i + 1..hi].to_vec(),
                label: tokens[i].clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &[&str]) -> Vec<String> {
        s.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn cleaning_examples() {
        let a = Alphabet::finnish();
        assert_eq!(clean_text("Jokeen, 1871!", &a).tokens(), &words(&["jokeen"])[..]);
        assert_eq!(
            clean_text("wäkeä ja voimaa", &a).tokens(),
            &words(&["wäkeä", "ja", "voimaa"])[..]
        );
        assert_eq!(clean_text("c1ean-up", &a).tokens(), &words(&["ceanup"])[..]);
        assert!(clean_text("", &a).is_empty());
        assert!(clean_text("123 !!! --", &a).is_empty());
    }

    #[test]
    fn alphabet_is_the_29_finnish_letters() {
        let a = Alphabet::finnish();
        assert_eq!(a.len(), 29);
        assert_eq!(a.index_of('a'), Some(0));
        assert_eq!(a.index_of('ö'), Some(28));
        let mut sorted = a.letters().to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 29);
    }

    #[test]
    fn blank_lines_split_documents() {
        let a = Alphabet::finnish();
        let s = clean_text("yksi kaksi\nkolme\n\n\n  \nneljä\n\n42\n", &a);
        assert_eq!(s.len(), 4);
        assert_eq!(s.doc_boundaries(), &[3, 4]);
        assert_eq!(clean_text(&s.to_text(), &a), s);
    }

    #[test]
    fn stream_validation() {
        assert!(TokenStream::new(words(&["a", ""]), vec![2]).is_err());
        assert!(TokenStream::new(words(&["a", "b"]), vec![2, 1]).is_err());
        assert!(TokenStream::new(words(&["a", "b"]), vec![3]).is_err());
        let s = TokenStream::new(words(&["a", "b", "c"]), vec![1]).unwrap();
        assert_eq!(s.doc_boundaries(), &[1, 3]);
    }

    #[test]
    fn windows_of_three_and_one() {
        let s = TokenStream::from_tokens(words(&["a", "b", "c"])).unwrap();
        let w3 = sliding_windows(&s, Window::new(3).unwrap());
        assert_eq!(w3.len(), 3);
        assert_eq!(w3[1].left, words(&["a"]));
        assert_eq!(w3[1].right, words(&["c"]));
        assert!(w3[0].left.is_empty());
        assert!(w3[2].right.is_empty());
        let w1 = sliding_windows(&s, Window::new(1).unwrap());
        assert!(w1.iter().all(|w| w.left.is_empty() && w.right.is_empty()));
        assert_eq!(
            w1.iter().map(|w| w.label.as_str()).collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
    }

    #[test]
    fn window_of_five_and_document_edges() {
        let s = TokenStream::from_tokens(words(&["a", "b", "c", "d", "e"])).unwrap();
        let w5 = sliding_windows(&s, Window::new(5).unwrap());
        assert_eq!(w5[2].left, words(&["a", "b"]));
        assert_eq!(w5[2].right, words(&["d", "e"]));

        let s = TokenStream::new(words(&["a", "b", "c", "d"]), vec![2, 4]).unwrap();
        let w = sliding_windows(&s, Window::new(3).unwrap());
        assert!(w[1].right.is_empty());
        assert!(w[2].left.is_empty());
    }

    #[test]
    fn even_windows_are_rejected() {
        assert!(matches!(Window::new(4), Err(Error::EvenWindow(4))));
        assert!(matches!(Window::new(0), Err(Error::EvenWindow(0))));
    }

    #[test]
    fn gt_table_filtering() {
        let a = Alphabet::finnish();
        let csv = "GT,TESSERACT,OLD,FR11\n\
                   kortti,kortt,kortt,kortti\n\
                   \"ja,\",ja,ja,ja\n\
                   talo,,talo,talo\n\
                   Joki,joki,jokl,joki\n\
                   only,three,fields\n";
        let t = parse_gt_table(csv.as_bytes(), b',', &a).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0], AlignedRow::new("kortti", "kortt", "kortt", "kortti"));
        assert_eq!(t.rows[1].gt, "joki");
        assert_eq!(t.rows[1].ocr(Engine::Old), "jokl");
        assert_eq!(t.dropped_non_alphabet, 1);
        assert_eq!(t.dropped_blank, 1);
        assert_eq!(t.malformed.len(), 1);
        assert_eq!(t.malformed[0].line, 6);
    }

    #[test]
    fn gt_table_requires_engine_columns() {
        let a = Alphabet::finnish();
        assert!(parse_gt_table("GT,OLD\nx,y\n".as_bytes(), b',', &a).is_err());
        let tsv = "FR11\tOLD\tGT\tTESSERACT\nc\tb\ta\td\n";
        let t = parse_gt_table(tsv.as_bytes(), b'\t', &a).unwrap();
        assert_eq!(t.rows[0], AlignedRow::new("a", "d", "b", "c"));
    }

    #[test]
    fn engine_names_round_trip() {
        for e in Engine::ALL {
            assert_eq!(Engine::parse(e.name()), Some(e));
        }
        assert_eq!(Engine::parse("fr11"), Some(Engine::Fr11));
        assert_eq!(Engine::parse("abbyy"), None);
    }
}
