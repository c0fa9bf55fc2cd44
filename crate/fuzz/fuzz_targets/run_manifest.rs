#![no_main]

use ethics_core::run::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<RunManifest>(data) {
        let _ = m.train_spec();
        let back: RunManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back.command, m.command);
    }
});
