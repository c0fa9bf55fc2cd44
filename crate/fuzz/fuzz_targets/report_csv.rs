#![no_main]

use ethics_core::metrics::parse_report_csv;
use ethics_core::report::{render_comparison, row_from_report};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rows) = parse_report_csv(text) else { return };
    if let Ok(row) = row_from_report("fuzz", &rows) {
        let _ = render_comparison("fuzz", &[row]);
    }
});
