#![no_main]

use ethics_core::report::{parse_baselines, render_comparison};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_baselines(text) {
        let rows: Vec<_> = rows.into_iter().map(|b| b.row).collect();
        let _ = render_comparison("fuzz", &rows);
    }
});
