#![no_main]

use libfuzzer_sys::fuzz_target;
use ssae::store::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        assert!(ck.params.max_column_norm_error() <= 1e-4);
        let again = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(again, ck);
    }
});
