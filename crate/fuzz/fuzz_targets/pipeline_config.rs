#![no_main]

use led_cli::config::apply_override;
use led_cli::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Optional second part after a NUL byte: one `key=value` override.
    let (doc, over) = match data.iter().position(|&b| b == 0) {
        Some(p) => (&data[..p], Some(&data[p + 1..])),
        None => (data, None),
    };
    let Ok(mut value) = serde_json::from_slice::<serde_json::Value>(doc) else { return };
    if let Some(o) = over.and_then(|o| std::str::from_utf8(o).ok()) {
        if apply_override(&mut value, o).is_err() {
            return;
        }
    }
    if let Ok(cfg) = PipelineConfig::from_value(value) {
        let again = PipelineConfig::from_value(serde_json::to_value(&cfg).unwrap()).expect("echoed config parses");
        assert_eq!(again, cfg);
    }
});
