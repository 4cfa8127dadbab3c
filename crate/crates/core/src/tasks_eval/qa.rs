//! Multi-document question answering and closed-book fact probes.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{
    fact_table, Fact, CONTEXT_ENTITIES, DOC, FILLER, PROBE_PREAMBLES, QA_PREAMBLE, QUESTION, RELATIONS,
    VALUES,
};
use crate::error::{Error, Result};

/// Tokens of one question, without the answer.
pub const QUESTION_LEN: usize = 3;

/// Scoring unit: a prompt and a closed candidate set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub prompt: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    /// Index into `candidates`.
    pub answer: usize,
}

/// Where the answer-bearing fact may sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Uniform,
    FirstDoc,
    LastDoc,
    /// At least this many tokens between the fact's value and the prompt end.
    AtLeast(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiDocQaTask {
    pub documents: Vec<Vec<usize>>,
    pub answer_doc: usize,
    /// `QUESTION r e`; the answer follows directly.
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub total_length: usize,
}

impl MultiDocQaTask {
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = QA_PREAMBLE.to_vec();
        for d in &self.documents {
            p.extend(d);
        }
        p.extend(&self.question);
        p
    }

    /// Candidates are the whole value alphabet.
    pub fn probe(&self) -> Probe {
        Probe {
            prompt: self.prompt(),
            candidates: VALUES.map(|v| vec![v]).collect(),
            answer: self.answer[0] - VALUES.start,
        }
    }
}

/// Facts each document of `doc_len` tokens carries.
pub fn facts_per_doc(doc_len: usize) -> usize {
    ((doc_len.saturating_sub(1)) / 3).clamp(1, 2)
}

/// Largest document count whose prompt fits in `total_length`.
pub fn docs_for_length(total_length: usize, doc_len: usize) -> usize {
    total_length.saturating_sub(QA_PREAMBLE.len() + QUESTION_LEN) / doc_len.max(1)
}

/// Documents and facts `(doc, position of the value within the doc, fact)`.
fn gen_documents(rng: &mut impl Rng, n_docs: usize, doc_len: usize) -> Result<(Vec<Vec<usize>>, Vec<(usize, usize, Fact)>)> {
    if doc_len < 4 {
        return Err(Error::Config(format!("doc_len {doc_len} below 4")));
    }
    let k = facts_per_doc(doc_len);
    let capacity = CONTEXT_ENTITIES.len() * RELATIONS.len() / k;
    if n_docs == 0 || n_docs > capacity {
        return Err(Error::Config(format!("n_docs {n_docs} outside 1..={capacity}")));
    }
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut uses = vec![0usize; CONTEXT_ENTITIES.len()];
    let mut docs = Vec::with_capacity(n_docs);
    let mut facts = Vec::new();
    let filler = doc_len - 1 - 3 * k;
    for d in 0..n_docs {
        let mut doc = vec![DOC];
        for i in 0..k {
            // least-used entities first, so entities stay unique while the pool lasts
            let least = *uses.iter().min().expect("entity pool is non-empty");
            let candidates: Vec<usize> = (0..uses.len()).filter(|&j| uses[j] == least).collect();
            let j = *candidates.choose(rng).expect("some entity has minimal use");
            let entity = CONTEXT_ENTITIES.start + j;
            let free: Vec<usize> = RELATIONS.filter(|r| !used.contains(&(entity, *r))).collect();
            let relation = *free.choose(rng).expect("capacity check leaves a free relation");
            uses[j] += 1;
            used.insert((entity, relation));
            let value = rng.random_range(VALUES);
            doc.extend([relation, entity, value]);
            facts.push((
                d,
                doc.len() - 1,
                Fact {
                    entity,
                    relation,
                    value,
                },
            ));
            let n_fill = filler / k + usize::from(i < filler % k);
            doc.extend((0..n_fill).map(|_| rng.random_range(FILLER)));
        }
        docs.push(doc);
    }
    Ok((docs, facts))
}

/// `n_docs` fact documents of `doc_len` tokens followed by one question.
/// Errors when the prompt would exceed `total_length`.
pub fn gen_multidoc_qa(rng: &mut impl Rng, n_docs: usize, doc_len: usize, total_length: usize) -> Result<MultiDocQaTask> {
    gen_multidoc_qa_placed(rng, n_docs, doc_len, total_length, Placement::Uniform)
}

pub fn gen_multidoc_qa_placed(
    rng: &mut impl Rng,
    n_docs: usize,
    doc_len: usize,
    total_length: usize,
    placement: Placement,
) -> Result<MultiDocQaTask> {
    let len = QA_PREAMBLE.len() + n_docs * doc_len + QUESTION_LEN;
    if len > total_length {
        return Err(Error::Config(format!("{n_docs} documents need {len} tokens > {total_length}")));
    }
    let (documents, facts) = gen_documents(rng, n_docs, doc_len)?;
    let eligible: Vec<&(usize, usize, Fact)> = facts
        .iter()
        .filter(|(d, pos, _)| match placement {
            Placement::Uniform => true,
            Placement::FirstDoc => *d == 0,
            Placement::LastDoc => *d == n_docs - 1,
            Placement::AtLeast(dist) => len - (QA_PREAMBLE.len() + d * doc_len + pos) > dist,
        })
        .collect();
    let &&(answer_doc, _, fact) = eligible
        .choose(rng)
        .ok_or_else(|| Error::Config(format!("no fact satisfies {placement:?}")))?;
    Ok(MultiDocQaTask {
        documents,
        answer_doc,
        question: vec![QUESTION, fact.relation, fact.entity],
        answer: vec![fact.value],
        total_length: len,
    })
}

/// Training document: preamble, documents, then `n_questions` answered questions.
pub fn qa_training_document(rng: &mut impl Rng, n_docs: usize, doc_len: usize, n_questions: usize) -> Result<Vec<usize>> {
    let (documents, mut facts) = gen_documents(rng, n_docs, doc_len)?;
    let mut out = QA_PREAMBLE.to_vec();
    for d in &documents {
        out.extend(d);
    }
    facts.shuffle(rng);
    for (_, _, f) in facts.iter().take(n_questions) {
        out.extend([QUESTION, f.relation, f.entity, f.value]);
    }
    Ok(out)
}

/// Closed-book probe for a table fact.
pub fn persistent_probe(fact: &Fact, preamble: &[usize]) -> Probe {
    let mut prompt = preamble.to_vec();
    prompt.extend([QUESTION, fact.relation, fact.entity]);
    Probe {
        prompt,
        candidates: VALUES.map(|v| vec![v]).collect(),
        answer: fact.value - VALUES.start,
    }
}

/// Every table fact under every probe preamble.
pub fn persistent_probes() -> Vec<Probe> {
    let table = fact_table();
    PROBE_PREAMBLES
        .iter()
        .flat_map(|p| table.iter().map(move |f| persistent_probe(f, p)))
        .collect()
}

/// Training document: a preamble and `n` answered table questions.
pub fn persistent_document(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let table = fact_table();
    let mut out = PROBE_PREAMBLES.choose(rng).expect("preambles exist").to_vec();
    for f in table.choose_multiple(rng, n) {
        out.extend([QUESTION, f.relation, f.entity, f.value]);
    }
    out
}
