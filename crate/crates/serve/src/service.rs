//! Request handling over an atomically swappable serving state.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use arc_swap::ArcSwapOption;
use led_core::model::augment_query;
use serde::{Deserialize, Serialize};

use crate::error::ServeError;
use crate::histogram::LatencyHistogram;
use crate::state::ServingState;

pub const DEFAULT_K: usize = 50;

/// An external item id; JSON strings and integers are both accepted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemId {
    Str(String),
    Int(i64),
}

impl ItemId {
    fn lookup(&self, state: &ServingState) -> Option<u32> {
        match self {
            ItemId::Str(s) => state.vocab.index_of(s),
            ItemId::Int(i) => state.vocab.index_of(&i.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    #[serde(default)]
    pub history: Vec<ItemId>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub ef_search: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub encode_us: u64,
    pub search_us: u64,
    pub total_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub items: Vec<String>,
    pub scores: Vec<f32>,
    pub served_by: String,
    /// History ids not in the catalog.
    pub dropped: usize,
    /// Fewer than `k` items exist.
    pub truncated: bool,
    pub timing: Timing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// Upper bound on a per-request `ef_search`.
    pub max_ef: usize,
    /// Beam width when the request names none; the index's own default
    /// when unset.
    pub ef_search: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { max_ef: 4096, ef_search: None }
    }
}

/// Maps ids, encodes the user, searches, and maps back. An empty or fully
/// unknown history is answered from the cached bias ranking.
pub fn recommend(state: &ServingState, req: &RecommendRequest, cfg: &ServeConfig) -> Result<RecommendResponse, ServeError> {
    let start = Instant::now();
    let k = req.k.unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(ServeError::BadRequest("k must be at least 1".into()));
    }
    let ef = req
        .ef_search
        .or(cfg.ef_search)
        .unwrap_or(state.index.params().ef_search)
        .min(cfg.max_ef);
    let known: Vec<u32> = req.history.iter().filter_map(|id| id.lookup(state)).collect();
    let dropped = req.history.len() - known.len();
    let (items, scores, encode_us, search_us) = if known.is_empty() {
        let n = k.min(state.cold_start.len());
        let t = start.elapsed().as_micros() as u64;
        (state.cold_start[..n].to_vec(), state.cold_start_scores[..n].to_vec(), 0, t)
    } else {
        let user = state.model.encode_user(&known).map_err(|e| ServeError::Internal(e.to_string()))?;
        let q = augment_query(&user);
        let encoded = start.elapsed();
        let top = state.index.search(&q, k, ef).map_err(|e| ServeError::Internal(e.to_string()))?;
        let searched = start.elapsed();
        (top.items, top.scores, encoded.as_micros() as u64, (searched - encoded).as_micros() as u64)
    };
    let items = items
        .iter()
        .map(|&i| state.vocab.id_of(i).expect("index and vocabulary agree").to_string())
        .collect();
    Ok(RecommendResponse {
        items,
        scores,
        served_by: state.version.clone(),
        dropped,
        truncated: k > state.model.n_items(),
        timing: Timing { encode_us, search_us, total_us: start.elapsed().as_micros() as u64 },
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
    pub p999: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub errors: u64,
    pub qps: f64,
    pub dropped_ids: u64,
    pub version: Option<String>,
    /// Microseconds, from bucket upper edges.
    pub encode_us: Percentiles,
    pub search_us: Percentiles,
    pub total_us: Percentiles,
}

#[derive(Default)]
struct Stats {
    requests: AtomicU64,
    errors: AtomicU64,
    dropped: AtomicU64,
    encode: LatencyHistogram,
    search: LatencyHistogram,
    total: LatencyHistogram,
}

fn percentiles(h: &LatencyHistogram) -> Percentiles {
    Percentiles { p50: h.percentile(0.5), p90: h.percentile(0.9), p99: h.percentile(0.99), p999: h.percentile(0.999) }
}

pub struct Service {
    state: ArcSwapOption<ServingState>,
    config: ServeConfig,
    stats: Stats,
    generation: AtomicU64,
    started: Instant,
}

impl Service {
    pub fn new(config: ServeConfig) -> Self {
        Self {
            state: ArcSwapOption::empty(),
            config,
            stats: Stats::default(),
            generation: AtomicU64::new(0),
            started: Instant::now(),
        }
    }

    pub fn config(&self) -> &ServeConfig {
        &self.config
    }

    pub fn state(&self) -> Option<Arc<ServingState>> {
        self.state.load_full()
    }

    pub fn install(&self, state: ServingState) {
        tracing::info!(version = %state.version, items = state.model.n_items(), "serving state installed");
        self.state.store(Some(Arc::new(state)));
    }

    /// Loads a new state from `dir` and swaps it in. On failure the current
    /// state keeps serving.
    pub fn reload(&self, dir: &Path) -> Result<String, ServeError> {
        let generation = self.generation.fetch_add(1, Ordering::Relaxed) + 1;
        match ServingState::load(dir, generation) {
            Ok(state) => {
                let v = state.version.clone();
                self.install(state);
                Ok(v)
            }
            Err(e) => {
                tracing::error!(dir = %dir.display(), error = %e, "reload rejected; keeping current state");
                Err(e)
            }
        }
    }

    /// Answers one request against a single snapshot of the state.
    pub fn handle_recommend(&self, req: &RecommendRequest) -> Result<RecommendResponse, ServeError> {
        let result = match self.state.load_full() {
            Some(state) => recommend(&state, req, &self.config),
            None => Err(ServeError::NotLoaded),
        };
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        match &result {
            Ok(r) => {
                self.stats.dropped.fetch_add(r.dropped as u64, Ordering::Relaxed);
                self.stats.encode.record(r.timing.encode_us as f64);
                self.stats.search.record(r.timing.search_us as f64);
                self.stats.total.record(r.timing.total_us as f64);
            }
            Err(_) => {
                self.stats.errors.fetch_add(1, Ordering::Relaxed);
            }
        }
        result
    }

    pub fn record_error(&self) {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        self.stats.errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn stats(&self) -> StatsSnapshot {
        let requests = self.stats.requests.load(Ordering::Relaxed);
        let secs = self.started.elapsed().as_secs_f64();
        StatsSnapshot {
            requests,
            errors: self.stats.errors.load(Ordering::Relaxed),
            qps: if secs > 0.0 { requests as f64 / secs } else { 0.0 },
            dropped_ids: self.stats.dropped.load(Ordering::Relaxed),
            version: self.state.load().as_ref().map(|s| s.version.clone()),
            encode_us: percentiles(&self.stats.encode),
            search_us: percentiles(&self.stats.search),
            total_us: percentiles(&self.stats.total),
        }
    }
}
