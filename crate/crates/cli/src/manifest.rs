//! Per-stage manifests: content hashes of every input and output plus the
//! effective configuration, so each artifact traces back to what made it.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub schema_version: u32,
    /// Input label → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// The stage's effective configuration, seeds included.
    pub config: Value,
    /// Output file (relative to the stage directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

impl Manifest {
    pub fn load(dir: &Path) -> Option<Manifest> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    /// True when this manifest was produced from exactly `inputs` and
    /// `config`, and every output it lists is still on disk unmodified.
    pub fn is_current(&self, inputs: &BTreeMap<String, String>, config: &Value, dir: &Path) -> bool {
        &self.inputs == inputs
            && &self.config == config
            && self
                .outputs
                .iter()
                .all(|(file, hash)| sha256_file(&dir.join(file)).is_ok_and(|h| &h == hash))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
