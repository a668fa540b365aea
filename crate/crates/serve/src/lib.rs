//! Online retrieval service for LED models.
//!
//! A request's history is mapped to catalog indices, averaged into a user
//! vector, extended with a constant 1 to pick up item biases, and sent to
//! the HNSW index. Histories with no known item get the cached
//! highest-bias items. Model, index and vocabulary live in one
//! [`ServingState`] that is swapped atomically on reload, so each request
//! sees exactly one version.

pub mod error;
pub mod histogram;
pub mod http;
pub mod service;
pub mod state;

pub use error::ServeError;
pub use service::{recommend, ItemId, RecommendRequest, RecommendResponse, ServeConfig, Service, StatsSnapshot};
pub use state::{write_artifacts, ServingState, INDEX_FILE, MODEL_FILE, VOCAB_FILE};
