//! Everything a request needs, loaded together and replaced together.

use std::hash::{DefaultHasher, Hasher};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use led_core::ann::{brute_force, AnnIndex};
use led_core::data::Vocabulary;
use led_core::model::{augment_query, LedModel, UserVector};

use crate::error::ServeError;

pub const MODEL_FILE: &str = "model.ledm";
pub const INDEX_FILE: &str = "index.ledi";
pub const VOCAB_FILE: &str = "vocab.ledv";

pub struct ServingState {
    pub model: LedModel,
    pub index: AnnIndex,
    pub vocab: Vocabulary,
    pub version: String,
    pub loaded_at: SystemTime,
    pub source: PathBuf,
    /// All items by descending bias, ties by index: the exact answer for a
    /// user with no known history.
    pub cold_start: Vec<u32>,
    pub cold_start_scores: Vec<f32>,
}

impl ServingState {
    /// Assembles a state after checking the three artifacts agree.
    pub fn new(model: LedModel, index: AnnIndex, vocab: Vocabulary, version: String, source: PathBuf) -> Result<Self, ServeError> {
        let (n, d) = (model.n_items(), model.dim());
        if index.len() != n || vocab.len() != n {
            return Err(ServeError::Inconsistent(format!(
                "model has {n} items, index {}, vocabulary {}",
                index.len(),
                vocab.len()
            )));
        }
        if index.dim() != d + 1 {
            return Err(ServeError::Inconsistent(format!("index vectors have {} dims, model needs {}", index.dim(), d + 1)));
        }
        let augmented = model.augment_for_mips();
        if augmented.data() != index.items().data() {
            return Err(ServeError::Inconsistent("index vectors were not built from this model".into()));
        }
        let cold = brute_force(&augmented, &augment_query(&UserVector::zeros(d)), n).expect("shapes checked");
        Ok(Self {
            model,
            index,
            vocab,
            version,
            loaded_at: SystemTime::now(),
            source,
            cold_start: cold.items,
            cold_start_scores: cold.scores,
        })
    }

    /// Loads `model.ledm`, `index.ledi` and `vocab.ledv` from `dir`. The
    /// version tag combines `generation` with a hash of the artifact bytes.
    pub fn load(dir: &Path, generation: u64) -> Result<Self, ServeError> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| ServeError::Artifact(format!("{}: {e}", p.display())))
        };
        let (mb, ib, vb) = (read(MODEL_FILE)?, read(INDEX_FILE)?, read(VOCAB_FILE)?);
        let mut h = DefaultHasher::new();
        for b in [&mb, &ib, &vb] {
            h.write(b);
        }
        let model = LedModel::from_bytes(&mb).map_err(|e| ServeError::Artifact(format!("{MODEL_FILE}: {e}")))?;
        let index = AnnIndex::from_bytes(&ib).map_err(|e| ServeError::Artifact(format!("{INDEX_FILE}: {e}")))?;
        let vocab = Vocabulary::from_bytes(&vb).map_err(|e| ServeError::Artifact(format!("{VOCAB_FILE}: {e}")))?;
        let version = format!("g{generation}-{:016x}", h.finish());
        Self::new(model, index, vocab, version, dir.to_path_buf())
    }
}

/// Writes the three serving artifacts into `dir`.
pub fn write_artifacts(dir: &Path, model: &LedModel, index: &AnnIndex, vocab: &Vocabulary) -> led_core::Result<()> {
    model.save(&dir.join(MODEL_FILE))?;
    index.save(&dir.join(INDEX_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))
}
