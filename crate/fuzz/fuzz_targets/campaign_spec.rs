#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::synthcorpus::CampaignSpec;

fuzz_target!(|text: &str| {
    if let Ok(spec) = toml::from_str::<CampaignSpec>(text) {
        let _ = spec.validate();
    }
});
