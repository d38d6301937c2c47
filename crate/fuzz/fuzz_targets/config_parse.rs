#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_service::PipelineConfig;

fuzz_target!(|text: &str| {
    let (doc, set) = text.split_once("\n--\n").unwrap_or((text, ""));
    let overrides: Vec<String> = set.lines().map(str::to_string).collect();
    if let Ok(cfg) = PipelineConfig::from_parts(doc, &[], &overrides) {
        let back = PipelineConfig::from_parts(&cfg.to_toml(), &[], &[]).expect("serialized config reloads");
        assert_eq!(back, cfg);
    }
});
