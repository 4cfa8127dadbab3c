//! Model checkpoints: `config.json` plus one `f32` tensor file and JSON
//! sidecar per named parameter. An `exact/` subdirectory keeps `f64` copies
//! so reloading reproduces the in-memory model bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor, DType};

pub const CONFIG_FILE: &str = "config.json";
const EXACT_DIR: &str = "exact";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub long_term: bool,
    /// Free-form run metadata (seed, step, source revision, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes into a sibling temporary directory and renames it into place, so
/// an interrupted write never leaves a half-written `dir`.
pub fn write_dir_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?;
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".{}.partial", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fill(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// Writes the model's files into an existing directory.
pub fn write_model_files(dir: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    let config = CheckpointConfig {
        model: model.config().clone(),
        long_term: model.long_term_enabled(),
        meta,
    };
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&config).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let exact = dir.join(EXACT_DIR);
    fs::create_dir_all(&exact).map_err(|e| Error::io(&exact, e))?;
    for p in model.params().iter() {
        write_tensor(dir, &p.name, &p.value, DType::F32)?;
        write_tensor(&exact, &p.name, &p.value, DType::F64)?;
    }
    Ok(())
}

pub fn save_model(dir: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    write_dir_atomic(dir, |tmp| write_model_files(tmp, model, meta))
}

pub fn read_checkpoint_config(dir: &Path) -> Result<CheckpointConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Loads a model, preferring the exact `f64` copies when present.
pub fn load_model(dir: &Path) -> Result<Model> {
    let config = read_checkpoint_config(dir)?;
    let exact = dir.join(EXACT_DIR);
    let source = if exact.is_dir() { exact } else { dir.to_path_buf() };
    let mut model = Model::from_named(config.model, |name, _| read_tensor(&source, name))?;
    model.set_long_term(config.long_term);
    Ok(model)
}
