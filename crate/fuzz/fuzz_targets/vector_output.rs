#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::embed::parse_vector_output;

fuzz_target!(|text: &str| {
    if let Ok(v) = parse_vector_output(text) {
        assert!(v.iter().all(|x| x.is_finite()));
    }
});
