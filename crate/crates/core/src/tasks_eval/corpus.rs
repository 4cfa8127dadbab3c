//! Seeded training corpus mixing the three task families.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::icl::{build_prompt, gen_icl_classification, LabelMode, PromptSpec};
use super::qa::{persistent_document, qa_training_document, QUESTION_LEN};
use super::vocab::QA_PREAMBLE;
use crate::error::{Error, Result};
use crate::training::{DocumentSource, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Relative document frequencies.
    pub weight_qa: f64,
    pub weight_icl: f64,
    pub weight_persistent: f64,
    /// Documents must fit one row including BOS/EOS.
    pub max_doc_len: usize,
    pub qa_doc_len: usize,
    pub qa_questions: usize,
    pub icl_classes: usize,
    pub icl_max_shots: usize,
    /// Share of classification documents with anonymous labels.
    pub icl_anonymous_share: f64,
    pub persistent_questions: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            weight_qa: 0.4,
            weight_icl: 0.3,
            weight_persistent: 0.3,
            max_doc_len: 254,
            qa_doc_len: 8,
            qa_questions: 20,
            icl_classes: 4,
            icl_max_shots: 8,
            icl_anonymous_share: 0.75,
            persistent_questions: 4,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.weight_qa, self.weight_icl, self.weight_persistent];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("corpus weights must be non-negative with a positive sum".into()));
        }
        if !(0.0..=1.0).contains(&self.icl_anonymous_share) {
            return Err(Error::Config("icl_anonymous_share must lie in [0, 1]".into()));
        }
        if self.max_qa_docs() == 0 {
            return Err(Error::Config(format!("max_doc_len {} fits no QA document", self.max_doc_len)));
        }
        Ok(())
    }

    fn max_qa_docs(&self) -> usize {
        let fixed = QA_PREAMBLE.len() + self.qa_questions * (QUESTION_LEN + 1);
        self.max_doc_len.saturating_sub(fixed) / self.qa_doc_len.max(1)
    }
}

/// Endless, deterministic stream of synthetic documents.
pub struct SyntheticCorpus {
    config: CorpusConfig,
    rng: ChaCha8Rng,
}

impl SyntheticCorpus {
    pub fn new(config: CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn icl_document(&mut self) -> Result<Vec<usize>> {
        let c = &self.config;
        let mode = if self.rng.random_bool(c.icl_anonymous_share) {
            LabelMode::Anonymous
        } else {
            LabelMode::Semantic
        };
        let shots = self.rng.random_range(0..=c.icl_max_shots);
        let task = gen_icl_classification(&mut self.rng, c.icl_classes, shots, mode)?;
        let spec = PromptSpec::variants(mode)[self.rng.random_range(0..4)];
        let mut doc = build_prompt(&task, &spec)?;
        doc.extend(&task.labels(mode)[task.answer]);
        doc.truncate(c.max_doc_len);
        Ok(doc)
    }
}

impl DocumentSource for SyntheticCorpus {
    fn next_document(&mut self) -> Result<Option<Vec<usize>>> {
        let c = &self.config;
        let total = c.weight_qa + c.weight_icl + c.weight_persistent;
        let u = self.rng.random_range(0.0..total);
        let doc = if u < c.weight_qa {
            let n_docs = self.rng.random_range(1..=c.max_qa_docs());
            let (len, q) = (c.qa_doc_len, c.qa_questions);
            qa_training_document(&mut self.rng, n_docs, len, q)?
        } else if u < c.weight_qa + c.weight_icl {
            self.icl_document()?
        } else {
            let n = c.persistent_questions;
            persistent_document(&mut self.rng, n)
        };
        Ok(Some(doc))
    }
}

/// `n` consecutive windows of exactly `len` tokens cut from the stream of
/// `BOS doc EOS` framed documents; no padding, so every last token is real.
pub fn stream_windows(source: &mut dyn DocumentSource, len: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let mut stream = Vec::with_capacity(len * n);
    while stream.len() < len * n {
        let Some(doc) = source.next_document()? else {
            return Err(Error::Input(format!("source ran dry after {} of {} tokens", stream.len(), len * n)));
        };
        stream.push(BOS);
        stream.extend(doc);
        stream.push(EOS);
    }
    Ok(stream.chunks_exact(len).take(n).map(<[usize]>::to_vec).collect())
}
