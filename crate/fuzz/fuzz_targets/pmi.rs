#![no_main]

use led_core::pmi::PmiMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = PmiMatrix::from_bytes(data) {
        for i in 0..m.n() {
            let (cols, vals) = m.row(i);
            assert_eq!(cols.len(), vals.len());
            assert!(cols.iter().all(|&c| (c as usize) < m.n()));
        }
        assert_eq!(PmiMatrix::from_bytes(&m.to_bytes()).expect("re-encoded matrix decodes"), m);
    }
});
