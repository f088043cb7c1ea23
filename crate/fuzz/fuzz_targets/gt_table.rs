#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore::corpus::{parse_gt_table, Alphabet, Engine};

fuzz_target!(|data: &[u8]| {
    let a = Alphabet::finnish();
    for delimiter in *b",\t" {
        if let Ok(table) = parse_gt_table(data, delimiter, &a) {
            for row in &table.rows {
                assert!(a.is_word(&row.gt));
                for e in Engine::ALL {
                    assert!(a.is_word(row.ocr(e)));
                }
            }
        }
    }
});
