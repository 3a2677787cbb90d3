#![no_main]

use libfuzzer_sys::fuzz_target;
use ssae::store::{decode_pair_header, decode_pairs, encode_pairs};

fuzz_target!(|data: &[u8]| {
    let header = decode_pair_header(data);
    if let Ok((h, pairs)) = decode_pairs(data) {
        assert_eq!(header.ok(), Some(h));
        assert_eq!(pairs.len() as u64, h.num_pairs);
        // Stored values are f32, so re-encoding is exact.
        assert_eq!(encode_pairs(&pairs, h.flags).unwrap(), data);
    }
});
