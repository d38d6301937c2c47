#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::imgproc::{preprocess, PreprocessConfig};
use pisco_core::{embed_reference, Screenshot};

fuzz_target!(|data: &[u8]| {
    let Ok(img) = Screenshot::from_png(data, "fuzz") else { return };
    if let Ok(clean) = preprocess(&img, &PreprocessConfig::default()) {
        let _ = embed_reference(&clean);
    }
});
