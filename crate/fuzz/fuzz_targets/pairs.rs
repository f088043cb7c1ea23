#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore::corpus::Alphabet;
use ocrrestore::pairgen::{format_pairs, parse_pairs};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let a = Alphabet::finnish();
    if let Ok(pairs) = parse_pairs(text, "fuzz", &a) {
        let again = parse_pairs(&format_pairs(&pairs), "fuzz", &a).expect("formatted pairs parse");
        assert_eq!(pairs, again);
    }
});
