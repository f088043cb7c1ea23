#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore::models::checkpoint::{embedding_from_bytes, model_from_bytes, Container};

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        assert_eq!(Container::from_bytes(&c.to_bytes()).expect("re-encoded container"), c);
    }
    let _ = model_from_bytes(data);
    let _ = embedding_from_bytes(data);
});
