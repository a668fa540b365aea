//! Small clustered event logs in the JSONL ingest format, for smoke runs and
//! tests. Each user mostly browses one cluster of items, with a skew toward
//! each cluster's first items, so a model has real structure to learn.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub min_events: usize,
    pub max_events: usize,
    /// Probability that an event stays inside the user's cluster.
    pub affinity: f64,
    pub click_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 400,
            items: 200,
            clusters: 8,
            min_events: 8,
            max_events: 30,
            affinity: 0.85,
            click_rate: 0.3,
            seed: 0,
        }
    }
}

pub fn write_jsonl<W: Write>(cfg: &SynthConfig, mut out: W) -> std::io::Result<()> {
    assert!(cfg.items >= cfg.clusters && cfg.clusters > 0, "need at least one item per cluster");
    assert!(cfg.min_events >= 1 && cfg.min_events <= cfg.max_events, "bad event range");
    let mut rng = led_core::seed::rng(cfg.seed);
    let members: Vec<Vec<usize>> =
        (0..cfg.clusters).map(|c| (c..cfg.items).step_by(cfg.clusters).collect()).collect();
    for u in 0..cfg.users {
        let home = rng.random_range(0..cfg.clusters);
        let len = rng.random_range(cfg.min_events..=cfg.max_events);
        for pos in 0..len {
            let item = if rng.random_bool(cfg.affinity) {
                let m = &members[home];
                let r: f64 = rng.random();
                m[((r * r) * m.len() as f64) as usize]
            } else {
                rng.random_range(0..cfg.items)
            };
            let kind = if rng.random_bool(cfg.click_rate) { "click" } else { "view" };
            let line = json!({"user": format!("u{u}"), "item": format!("i{item}"), "kind": kind, "ts": 1_600_000_000 + 60 * pos});
            writeln!(out, "{line}")?;
        }
    }
    out.flush()
}
