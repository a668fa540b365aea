#![no_main]

use led_core::model::LedModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = LedModel::from_bytes(data) {
        let again = LedModel::from_bytes(&m.to_bytes()).expect("re-encoded model decodes");
        assert_eq!(again, m);
        if m.n_items() > 0 {
            let u = m.encode_user(&[0]).expect("item 0 exists");
            assert_eq!(m.score_all(&u).len(), m.n_items());
        }
    }
});
