#![no_main]

use led_core::rsvd::EmbeddingMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(e) = EmbeddingMatrix::from_bytes(data) {
        assert_eq!(e.data().len(), e.rows() * e.dim());
        assert_eq!(EmbeddingMatrix::from_bytes(&e.to_bytes()).expect("re-encoded embeddings decode"), e);
    }
});
