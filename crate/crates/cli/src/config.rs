//! The pipeline configuration: one JSON document, overridable with dotted
//! `key=value` pairs.

use std::path::{Path, PathBuf};

use led_core::ann::HnswParams;
use led_core::data::SplitSpec;
use led_core::eval::EvalConfig;
use led_core::pmi::KindFilter;
use led_core::rsvd::RsvdConfig;
use led_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Version of the configuration layout this build reads.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub pmi: PmiConfig,
    pub rsvd: RsvdConfig,
    pub train: TrainConfig,
    pub ann: HnswParams,
    pub eval: EvalStageConfig,
    pub sweep: SweepConfig,
    pub serve: ServeStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            pmi: PmiConfig::default(),
            rsvd: RsvdConfig::default(),
            train: TrainConfig::default(),
            ann: HnswParams::default(),
            eval: EvalStageConfig::default(),
            sweep: SweepConfig::default(),
            serve: ServeStageConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// `.csv` files are read as MovieLens ratings, anything else as JSONL.
    #[default]
    Auto,
    Ml20m,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw event log read by the ingest stage.
    pub data: Option<PathBuf>,
    pub format: InputFormat,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: None, format: InputFormat::Auto, workdir: PathBuf::from("work") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split: SplitSpec,
    /// MovieLens only: ratings below this are dropped.
    pub min_rating: f64,
    /// MovieLens only: users with fewer kept ratings are dropped.
    pub min_events: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { split: SplitSpec::default(), min_rating: 4.0, min_events: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmiConfig {
    pub alpha: f64,
    pub min_count: u64,
    pub kinds: KindFilter,
    pub max_pairs_per_timeline: usize,
}

impl Default for PmiConfig {
    fn default() -> Self {
        Self { alpha: 0.75, min_count: 1, kinds: KindFilter::Views, max_pairs_per_timeline: 10_000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStageConfig {
    pub metrics: EvalConfig,
    /// Rank through the ANN index instead of exact scoring.
    pub use_index: bool,
    /// Beam width when ranking through the index; `ann.ef_search` when unset.
    pub ef_search: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub negatives: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { negatives: vec![10, 100, 1000] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeStageConfig {
    pub host: String,
    pub port: u16,
    pub max_ef: usize,
    /// Artifact directory to serve; `<workdir>/index` when unset.
    pub dir: Option<PathBuf>,
}

impl Default for ServeStageConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, max_ef: 4096, dir: None }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults), applies overrides in order and
    /// deserializes the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self, CliError> {
        let cfg: PipelineConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            CliError::Schema { path, message: e.into_inner().to_string() }
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Schema {
                path: "schema_version".into(),
                message: format!("unsupported version {}, this build reads {SCHEMA_VERSION}", cfg.schema_version),
            });
        }
        Ok(cfg)
    }
}

/// Sets `a.b.c=value` in a JSON document, creating intermediate objects.
/// The value is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (depth, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().unwrap()
            }
            _ => {
                return Err(CliError::Config(format!(
                    "override {key:?}: `{}` is not an object",
                    parts[..depth].join(".")
                )))
            }
        };
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("override key has at least one segment")
}
