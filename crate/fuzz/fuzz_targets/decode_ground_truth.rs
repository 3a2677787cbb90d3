#![no_main]

use libfuzzer_sys::fuzz_target;
use ssae::store::{decode_ground_truth, encode_ground_truth};

fuzz_target!(|data: &[u8]| {
    if let Ok(gt) = decode_ground_truth(data) {
        let again = decode_ground_truth(&encode_ground_truth(&gt).unwrap()).unwrap();
        assert_eq!(again, gt);
    }
});
