#![no_main]

use led_core::data::{ingest_ml20m_reader, Ml20mFilter};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let filter = Ml20mFilter { min_rating: 4.0, min_events: 2 };
    if let Ok(ts) = ingest_ml20m_reader(data, filter) {
        assert!(ts.timelines().iter().all(|t| t.len() >= 2));
    }
});
