#![no_main]

use ethics_core::model::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::from_text(text) {
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
});
