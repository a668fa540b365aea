#![no_main]

use std::sync::OnceLock;

use led_core::ann::{AnnIndex, HnswParams};
use led_core::data::Vocabulary;
use led_core::model::{LedModel, NormMode};
use led_serve::{recommend, RecommendRequest, ServeConfig, ServingState};
use libfuzzer_sys::fuzz_target;

fn state() -> &'static ServingState {
    static STATE: OnceLock<ServingState> = OnceLock::new();
    STATE.get_or_init(|| {
        let model = LedModel::random_full(64, 8, NormMode::OverT, 1).unwrap();
        let index = AnnIndex::build(model.augment_for_mips(), HnswParams::default()).unwrap();
        let vocab = Vocabulary::from_ids((0..64).map(|i| i.to_string()).collect()).unwrap();
        ServingState::new(model, index, vocab, "fuzz".into(), "fuzz".into()).unwrap()
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(req) = serde_json::from_slice::<RecommendRequest>(data) else { return };
    let cfg = ServeConfig { max_ef: 256, ef_search: None };
    if let Ok(resp) = recommend(state(), &req, &cfg) {
        assert_eq!(resp.items.len(), resp.scores.len());
        assert!(resp.items.len() <= req.k.unwrap_or(50));
        assert!(resp.scores.windows(2).all(|w| w[0] >= w[1]));
    }
});
