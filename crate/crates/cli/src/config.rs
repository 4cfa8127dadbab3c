//! Run configuration: a TOML file, dotted-path overrides, an output root.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mosaics_core::tasks_eval::{CorpusConfig, LabelMode};
use mosaics_core::training::TrainConfig;
use mosaics_core::ModelConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory relative output paths live under.
pub const OUT_ENV: &str = "MOSAICS_OUT";
/// Written next to every command's outputs.
pub const RESOLVED_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives model init, data order, delay sampling and task generation.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// One document per line, whitespace-separated token ids.
    Tokens,
    /// Raw UTF-8, one document per line, byte-level tokens.
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub corpus: CorpusConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Classification tasks per shot count.
    pub n_tasks: usize,
    pub shots: Vec<usize>,
    pub n_classes: usize,
    pub label_mode: LabelMode,
    pub qa_doc_len: usize,
    pub qa_n: usize,
    /// Defaults to the model's training length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qa_length: Option<usize>,
    /// Extrapolation lengths as multiples of the training length.
    pub extrapolate_factors: Vec<usize>,
    /// Ablation QA length as a multiple of the short-term window.
    pub ablate_window_factor: usize,
    pub ablate_max_persistent_shift: f64,
    pub ablate_min_qa_drop: f64,
    pub profile_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_tasks: 500,
            shots: vec![1, 2, 4, 8],
            n_classes: 4,
            label_mode: LabelMode::Anonymous,
            qa_doc_len: 8,
            qa_n: 200,
            qa_length: None,
            extrapolate_factors: vec![1, 2, 4, 8],
            ablate_window_factor: 4,
            ablate_max_persistent_shift: 2.0,
            ablate_min_qa_drop: 20.0,
            profile_sequences: 100,
        }
    }
}

/// Directory relative output paths are resolved against.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn under_root(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        output_root().join(p)
    }
}

/// Sets `key = value` where `key` is a dotted path; the value is parsed as
/// TOML and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table has the key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {p:?} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses `text` with overrides applied; `seed` wins over both.
pub fn parse_config(text: &str, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut doc: toml::Table = text.parse().context("config is not valid TOML")?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        doc.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let mut cfg: RunConfig = doc.try_into().context("config does not match the run schema")?;
    cfg.train.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.data.source == DataSource::Synthetic {
        cfg.data.corpus.validate()?;
    } else if cfg.data.path.is_none() {
        bail!("data.source {:?} needs data.path", cfg.data.source);
    }
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    parse_config(&text, overrides, seed).with_context(|| format!("in config {}", path.display()))
}

pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(RESOLVED_FILE);
    fs::write(&path, toml::to_string(cfg)?).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
out_dir = "x"
[model]
n_layers = 1
d_model = 8
n_heads = 2
vocab_size = 400
h = 8
m_train_range = [2, 4]
m_eval = 4
max_seq_len = 32
ffn_hidden = 16
[train]
batch_size = 2
seq_len = 32
lr_peak = 0.01
warmup_steps = 1
total_steps = 3
seed = 99
"#;

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = parse_config(
            MINIMAL,
            &["model.d_model=16".into(), "eval.label_mode=semantic".into(), "out_dir=elsewhere".into()],
            None,
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.eval.label_mode, LabelMode::Semantic);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn seed_flag_wins_and_propagates() {
        let cfg = parse_config(MINIMAL, &["seed=5".into()], Some(8)).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (8, 8));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = parse_config(MINIMAL, &[], None).unwrap();
        let again = parse_config(&toml::to_string(&cfg).unwrap(), &[], None).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_overrides() {
        assert!(parse_config(MINIMAL, &["model.depth=3".into()], None).is_err());
        assert!(parse_config(MINIMAL, &["nonsense".into()], None).is_err());
        assert!(parse_config(MINIMAL, &["seed.x=1".into()], None).is_err());
    }
}
