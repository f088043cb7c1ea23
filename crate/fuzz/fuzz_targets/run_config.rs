#![no_main]

use libfuzzer_sys::fuzz_target;
use ocrrestore_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        if let Ok(cfg) = cfg.resolve() {
            let written = cfg.to_toml();
            let again = RunConfig::parse(&written).expect("written config parses");
            assert_eq!(again.to_toml(), written);
        }
    }
});
