#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore::embedding::{NeighborSource, NeighborTable};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = NeighborTable::parse(text, "fuzz") {
        for w in table.vocabulary() {
            let n = table.neighbors(&w, 5).expect("listed word has neighbors");
            assert!(n.len() <= 5);
            assert!(n.windows(2).all(|p| p[0].1 >= p[1].1));
        }
    }
});
