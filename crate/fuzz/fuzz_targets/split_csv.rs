#![no_main]

use ethics_core::batching::Domain;
use ethics_core::dataset::{parse_split, DomainSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&selector, body)) = data.split_first() else { return };
    let domain = Domain::ALL[selector as usize % Domain::ALL.len()];
    if let Ok(split) = parse_split(body, &DomainSpec::default_for(domain), "fuzz") {
        let ids: Vec<usize> = split.examples.iter().map(|e| e.id).collect();
        let _ = split.subset_csv(&ids);
    }
});
