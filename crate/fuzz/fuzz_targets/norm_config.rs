#![no_main]

use ethics_core::text_normalize::{normalize, NormConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = NormConfig::parse(text) {
        let _ = normalize("It's LOUD in here, isn't it?", &cfg);
    }
});
