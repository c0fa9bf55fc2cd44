#![no_main]

use ethics_core::tokenizer::{decode, encode, Vocab};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(vocab) = Vocab::from_text(text) else { return };
    // a parsed vocabulary must serialize back to itself
    assert_eq!(Vocab::from_text(&vocab.to_text()).unwrap().to_text(), vocab.to_text());
    let ids = encode("the cat sat on the mat", &vocab);
    decode(&ids, &vocab).unwrap();
});
