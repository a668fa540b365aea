#![no_main]

use led_core::data::TimelineSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ts) = TimelineSet::from_bytes(data) {
        let again = TimelineSet::from_bytes(&ts.to_bytes()).expect("re-encoded timelines decode");
        assert_eq!(again, ts);
    }
});
