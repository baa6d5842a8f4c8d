//! Versioned JSON model documents, written atomically.

use std::io::{BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::online::TrainedModel;
use crate::subtype::ModelSelectionTrace;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything `train` produces. The shape fields duplicate information in
/// `model` so that a reader can check them without decoding the experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub dim: usize,
    pub num_experts: usize,
    pub num_epochs: usize,
    pub epoch_duration: f64,
    pub seed: u64,
    pub config: Config,
    pub selection: ModelSelectionTrace,
    pub model: TrainedModel,
}

impl ModelFile {
    pub fn new(
        model: TrainedModel,
        config: Config,
        selection: ModelSelectionTrace,
        seed: u64,
    ) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            dim: model.dim(),
            num_experts: model.num_experts(),
            num_epochs: model.num_epochs(),
            epoch_duration: model.epoch_duration(),
            seed,
            config,
            selection,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "model file has schema version {}, this build reads {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        let m = &self.model;
        if (self.dim, self.num_experts, self.num_epochs)
            != (m.dim(), m.num_experts(), m.num_epochs())
            || self.epoch_duration != m.epoch_duration()
        {
            return Err(Error::SchemaMismatch(
                "model file header disagrees with its parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        f.validate()?;
        Ok(f)
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: ModelFile = serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
        f.validate()?;
        Ok(f)
    }
}

/// Replace `path` with `bytes` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
