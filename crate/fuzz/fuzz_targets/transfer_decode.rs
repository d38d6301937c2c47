#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::mailparse::transfer::{decode_base64, decode_quoted_printable, decode_text};

fuzz_target!(|data: &[u8]| {
    let _ = decode_base64(data);
    let _ = decode_quoted_printable(data);
    let (label, body) = data.split_at(data.len().min(12));
    let _ = decode_text(body, std::str::from_utf8(label).ok());
});
