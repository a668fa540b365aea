#![no_main]

use led_core::ann::AnnIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(idx) = AnnIndex::from_bytes(data) {
        assert_eq!(AnnIndex::from_bytes(&idx.to_bytes()).expect("re-encoded index decodes"), idx);
        if idx.len() > 0 {
            let q = vec![1.0f32; idx.dim()];
            let top = idx.search(&q, 5, 16).expect("well-formed query");
            assert!(top.items.len() <= 5);
            assert!(top.items.iter().all(|&i| (i as usize) < idx.len()));
        }
    }
});
