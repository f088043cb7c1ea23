//! Writes the toy fixture set used by the README walkthrough and the
//! reproducibility check: `cargo run --example toy_corpus -- fixtures/toy`.

use std::fs;
use std::path::PathBuf;

use ocrrestore::corpus::TokenStream;
use ocrrestore::errorgen::ConfusionChannel;
use ocrrestore::synth::{corrupt_stream, SyntheticLanguage};

const CONFUSIONS: [(char, char); 3] = [('i', 'l'), ('v', 'w'), ('n', 'u')];

fn channel(rate: f64) -> ConfusionChannel {
    let rules: Vec<(char, char, f64)> = CONFUSIONS.iter().map(|&(a, b)| (a, b, rate)).collect();
    ConfusionChannel::new(&rules).expect("valid rates")
}

/// Sentence-cased lines of ten words with some punctuation, documents
/// separated by blank lines.
fn raw_text(stream: &TokenStream) -> String {
    let mut out = String::new();
    for doc in stream.documents() {
        let words = &stream.tokens()[doc];
        for (li, line) in words.chunks(10).enumerate() {
            let mut parts: Vec<String> = line.to_vec();
            if li == 0 {
                let mut c = parts[0].chars();
                let first = c.next().expect("nonempty").to_uppercase().collect::<String>();
                parts[0] = first + c.as_str();
            }
            if parts.len() > 4 {
                parts[3].push(',');
            }
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        if let Some(n) = out.pop() {
            out.push('.');
            out.push(n);
        }
        out.push('\n');
    }
    out
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/toy".into()));
    fs::create_dir_all(&dir).expect("output directory");
    let lang = SyntheticLanguage::generate(200, 20, &CONFUSIONS, 7);

    let clean = lang.sample(100, 20, 1).expect("sample");
    fs::write(dir.join("raw.txt"), raw_text(&clean)).expect("write raw");

    let ocr = corrupt_stream(&lang.sample(1000, 20, 5).expect("sample"), &channel(0.08), 6).expect("corrupt");
    fs::write(dir.join("ocr.txt"), ocr.to_text()).expect("write ocr");

    let mut words = lang.words.clone();
    words.sort();
    fs::write(dir.join("wordlist.txt"), words.join("\n") + "\n").expect("write wordlist");

    let test = lang.sample(10, 20, 2).expect("sample");
    let engines = [(0.05, 31), (0.1, 32), (0.08, 33)];
    let columns: Vec<TokenStream> = engines
        .iter()
        .map(|&(rate, seed)| corrupt_stream(&test, &channel(rate), seed).expect("corrupt"))
        .collect();
    let mut table = String::from("GT,TESSERACT,OLD,FR11\n");
    for (i, gt) in test.tokens().iter().enumerate() {
        let row: Vec<&str> = columns.iter().map(|c| c.tokens()[i].as_str()).collect();
        table.push_str(&format!("{gt},{}\n", row.join(",")));
    }
    fs::write(dir.join("gt.csv"), table).expect("write gt");
}
