#![no_main]

use libfuzzer_sys::fuzz_target;
use ssae::store::decode_labels;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = decode_labels(data) {
        let n = labels.concepts.len();
        assert!(labels.pairs.iter().all(|p| p.varying.iter().all(|&k| k < n)));
    }
});
