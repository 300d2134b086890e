#![no_main]

use derain_sr::scorer::parse_score_output;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = parse_score_output(text) {
            assert!(v.is_finite());
        }
    }
});
