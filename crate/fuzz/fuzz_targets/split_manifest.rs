#![no_main]

use ethics_core::dataset::SplitManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = SplitManifest::parse(text) {
        assert_eq!(SplitManifest::parse(&m.to_text()).unwrap(), m);
    }
});
