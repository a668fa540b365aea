use std::sync::Arc;

use led_core::ann::{AnnIndex, HnswParams};
use led_core::data::Vocabulary;
use led_core::model::{LedModel, NormMode};
use led_serve::http::serve;
use led_serve::{write_artifacts, ServeConfig, Service};
use serde_json::{json, Value};

async fn start(svc: Arc<Service>) -> (String, tokio::sync::oneshot::Sender<()>) {
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let (addr_tx, addr_rx) = tokio::sync::oneshot::channel();
    tokio::spawn(serve(svc, "127.0.0.1:0".parse().unwrap(), move |a| addr_tx.send(a).unwrap(), async move {
        let _ = rx.await;
    }));
    (format!("http://{}", addr_rx.await.unwrap()), tx)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let model = LedModel::random_full(100, 8, NormMode::OverT, 1).unwrap();
    let vocab = Vocabulary::from_ids((0..100).map(|i| i.to_string()).collect()).unwrap();
    let index = AnnIndex::build(model.augment_for_mips(), HnswParams::default()).unwrap();
    write_artifacts(dir.path(), &model, &index, &vocab).unwrap();

    let svc = Arc::new(Service::new(ServeConfig::default()));
    let (base, stop) = start(svc.clone()).await;
    let c = reqwest::Client::new();

    let r = c.get(format!("{base}/health")).send().await.unwrap();
    assert_eq!(r.status(), 503);
    let r = c.post(format!("{base}/v1/recommend")).json(&json!({"history": []})).send().await.unwrap();
    assert_eq!(r.status(), 503);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["code"], "not_loaded");

    let stats: Value = c.get(format!("{base}/v1/stats")).send().await.unwrap().json().await.unwrap();
    assert!(stats["total_us"]["p50"].is_null());
    assert_eq!(stats["dropped_ids"], 0);

    let r = c.post(format!("{base}/v1/reload")).json(&json!({"dir": dir.path()})).send().await.unwrap();
    assert_eq!(r.status(), 200);
    let version = r.json::<Value>().await.unwrap()["version"].as_str().unwrap().to_string();
    assert_eq!(c.get(format!("{base}/health")).send().await.unwrap().status(), 200);

    let r: Value = c
        .post(format!("{base}/v1/recommend"))
        .json(&json!({"history": ["3", 7, "unknown"], "k": 5}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(r["items"].as_array().unwrap().len(), 5);
    assert_eq!(r["served_by"], version.as_str());
    assert_eq!(r["dropped"], 1);
    let scores: Vec<f64> = r["scores"].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    for bad in ["{", r#"{"history": "x"}"#, r#"{"k": 0}"#, r#"{"history": [], "extra": 1}"#] {
        let r = c.post(format!("{base}/v1/recommend")).body(bad).send().await.unwrap();
        assert_eq!(r.status(), 400, "{bad}");
        let body: Value = r.json().await.unwrap();
        assert_eq!(body["code"], "bad_request");
        assert!(!body["message"].as_str().unwrap().is_empty());
    }

    let r = c.post(format!("{base}/v1/reload")).json(&json!({"dir": "/nonexistent"})).send().await.unwrap();
    assert_eq!(r.status(), 422);
    assert_eq!(c.get(format!("{base}/health")).send().await.unwrap().status(), 200);

    let stats: Value = c.get(format!("{base}/v1/stats")).send().await.unwrap().json().await.unwrap();
    assert_eq!(stats["dropped_ids"], 1);
    assert!(stats["total_us"]["p50"].is_number());
    assert_eq!(stats["version"], version.as_str());
    stop.send(()).unwrap();
}
