#![no_main]

use led_core::data::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = Vocabulary::from_bytes(data) {
        for (i, id) in v.ids().iter().enumerate() {
            assert_eq!(v.index_of(id), Some(i as u32));
        }
        assert_eq!(Vocabulary::from_bytes(&v.to_bytes()).expect("re-encoded vocabulary decodes"), v);
    }
});
