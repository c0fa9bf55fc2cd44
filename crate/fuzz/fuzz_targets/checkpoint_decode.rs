#![no_main]

use ethics_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((params, cfg)) = decode_checkpoint(data) {
        let again = encode_checkpoint(&params, &cfg);
        let (p2, c2) = decode_checkpoint(&again).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2.num_scalars(), params.num_scalars());
    }
});
