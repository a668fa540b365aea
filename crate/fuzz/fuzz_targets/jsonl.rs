#![no_main]

use led_core::data::{ingest_jsonl_reader, TimelineSet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ts) = ingest_jsonl_reader(data) {
        let again = TimelineSet::from_bytes(&ts.to_bytes()).expect("ingested set round-trips");
        assert_eq!(again, ts);
    }
});
