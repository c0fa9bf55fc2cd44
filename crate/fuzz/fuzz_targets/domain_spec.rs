#![no_main]

use ethics_core::dataset::DomainSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = DomainSpec::parse(text) {
        assert_eq!(DomainSpec::parse(&spec.to_text()).unwrap(), spec);
    }
});
