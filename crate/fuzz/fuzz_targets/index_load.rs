#![no_main]

use libfuzzer_sys::fuzz_target;
use pisco_core::VectorIndex;

fuzz_target!(|data: &[u8]| {
    if let Ok(idx) = VectorIndex::from_bytes(data) {
        assert_eq!(idx.to_bytes(), data);
        if let Some(v) = idx.ids().first().and_then(|id| idx.get(id)) {
            let _ = idx.search_knn(&v, 5);
        }
    }
});
