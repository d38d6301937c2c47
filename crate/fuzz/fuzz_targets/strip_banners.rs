#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::mailparse::{strip_banners, BannerPatternSet};

fuzz_target!(|html: &str| {
    let rules = BannerPatternSet::default();
    let (once, _) = strip_banners(html, &rules);
    let (twice, removed) = strip_banners(&once, &rules);
    assert_eq!(removed, 0);
    assert_eq!(once, twice);
});
