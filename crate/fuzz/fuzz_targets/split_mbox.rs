#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::mailparse::{parse_email, split_mbox};

fuzz_target!(|data: &[u8]| {
    for msg in split_mbox(data) {
        let _ = parse_email(&msg, "fuzz", 0);
    }
});
