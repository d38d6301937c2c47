#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::ClusterStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = ClusterStore::from_bytes(data) {
        assert_eq!(store.to_bytes(), data);
        let _ = store.size_histogram();
        let _ = store.lifespan_stats();
    }
});
