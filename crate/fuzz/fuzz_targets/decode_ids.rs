#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore::encoding::{decode_ids, encode_label, CharVocab};

fuzz_target!(|data: &[u8]| {
    let vocab = CharVocab::standard();
    let ids: Vec<usize> = data.iter().map(|&b| b as usize % (vocab.len() + 2)).collect();
    if let Ok(word) = decode_ids(&ids, &vocab) {
        if !word.is_empty() && word.chars().count() <= 30 {
            let back = decode_ids(&encode_label(&word, &vocab).expect("letters encode"), &vocab).expect("decodes");
            assert_eq!(back, word);
        }
    }
});
