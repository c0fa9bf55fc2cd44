#![no_main]

use ethics_core::text_normalize::{normalize, NormConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let cfg = NormConfig::default();
    let once = normalize(text, &cfg);
    assert_eq!(normalize(&once, &cfg), once);
});
