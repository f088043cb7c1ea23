#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore::corpus::{clean_text, Alphabet};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let a = Alphabet::finnish();
    let once = clean_text(text, &a);
    assert!(once.tokens().iter().all(|t| a.is_word(t)));
    let twice = clean_text(&once.to_text(), &a);
    assert_eq!(once.tokens(), twice.tokens());
});
