#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::mailparse::{parse_email, rewrite_email, select_render_part};

fuzz_target!(|data: &[u8]| {
    let Ok(rec) = parse_email(data, "fuzz", 0) else { return };
    let Ok(html) = select_render_part(&rec) else { return };
    // a rewritten message must parse back to the same html
    if let Ok(out) = rewrite_email(&rec, &html) {
        let again = parse_email(&out, "fuzz", 0).expect("rewrite output parses");
        assert_eq!(select_render_part(&again).expect("rewrite keeps an html part"), html);
    }
});
