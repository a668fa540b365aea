//! Lightweight encoder-decoder (LED) candidate retrieval.
//!
//! The offline path turns raw event logs into a [`data::TimelineSet`], builds
//! an item-item PMI matrix ([`pmi`]), factorizes it with a randomized SVD
//! ([`rsvd`]) and fine-tunes a projection of the resulting embeddings on
//! click targets ([`trainer`]). The trained [`model::LedModel`] scores a user
//! as the average of their item embeddings against every item embedding plus
//! a per-item bias; after bias augmentation that score is a plain inner
//! product, which [`ann`] serves with an HNSW graph.
//!
//! Every artifact has a little-endian binary format with a four byte magic
//! (`LEDT`, `LEDV`, `LEDP`, `LEDE`, `LEDM`, `LEDI`); decoders reject
//! truncated or inconsistent input instead of panicking.

pub mod ann;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pmi;
pub mod rsvd;
pub mod seed;
pub mod trainer;
mod vecmath;

pub use error::{Error, Result};
