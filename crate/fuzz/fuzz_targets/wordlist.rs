#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore::corpus::Alphabet;
use ocrrestore::lexicon::parse_wordlist;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let a = Alphabet::finnish();
    if let Ok(lex) = parse_wordlist(text, "fuzz", &a) {
        assert!(lex.sorted_words().iter().all(|w| a.is_word(w) && lex.is_valid(w)));
    }
});
