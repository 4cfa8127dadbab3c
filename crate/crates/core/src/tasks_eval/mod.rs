//! Synthetic task generators, evaluation suites and attention profiles.

mod corpus;
mod eval;
mod icl;
mod induction;
mod profile;
mod qa;
pub mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use corpus::{stream_windows, CorpusConfig, SyntheticCorpus};
pub use eval::{
    eval_extrapolation, eval_icl, eval_induction, eval_persistent_knowledge, eval_probes, eval_qa, predict,
    qa_probes_at_length, score_candidates, spearman, EvalDetail, EvalReport, EvalRow,
};
pub use icl::{build_prompt, gen_icl_classification, sample_x, Delimiter, IclTask, LabelMode, PromptSpec, X_LEN, X_NOISE};
pub use induction::{gen_induction_task, induction_oracle, InductionSource, InductionTask};
pub use profile::{attention_profile, last_token_weights, AttentionProfile, ProfileRow, ProfileSelection};
pub use qa::{
    docs_for_length, facts_per_doc, gen_multidoc_qa, gen_multidoc_qa_placed, persistent_document, persistent_probe,
    persistent_probes, qa_training_document, MultiDocQaTask, Placement, Probe, QUESTION_LEN,
};

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}
