//! Token layout of the synthetic task language.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::training::FIRST_FREE_ID;

pub const DOC: usize = FIRST_FREE_ID;
pub const QUESTION: usize = FIRST_FREE_ID + 1;
pub const QUERY: usize = FIRST_FREE_ID + 2;
pub const INTENT: usize = FIRST_FREE_ID + 3;
pub const SPACE: usize = FIRST_FREE_ID + 4;
pub const NEWLINE: usize = FIRST_FREE_ID + 5;

const fn after(r: &Range<usize>, n: usize) -> Range<usize> {
    r.end..r.end + n
}

/// Instruction words used by preambles.
pub const WORDS: Range<usize> = FIRST_FREE_ID + 6..FIRST_FREE_ID + 6 + 16;
pub const RELATIONS: Range<usize> = after(&WORDS, 4);
pub const VALUES: Range<usize> = after(&RELATIONS, 16);
/// Entities whose facts live in a fixed table (learned into weights).
pub const PERSISTENT_ENTITIES: Range<usize> = after(&VALUES, 16);
/// Entities whose facts are drawn fresh per document.
pub const CONTEXT_ENTITIES: Range<usize> = after(&PERSISTENT_ENTITIES, 128);
pub const FILLER: Range<usize> = after(&CONTEXT_ENTITIES, 64);
pub const ICL_CLASSES: usize = 12;
pub const SIGNATURE_LEN: usize = 4;
/// Tokens making up the class templates, `SIGNATURE_LEN` per class.
pub const ICL_TOKENS: Range<usize> = after(&FILLER, ICL_CLASSES * SIGNATURE_LEN);
/// One fixed label token per class, correlated with its template in the corpus.
pub const SEMANTIC_LABELS: Range<usize> = after(&ICL_TOKENS, ICL_CLASSES);
/// "class k" symbols carrying no meaning across tasks.
pub const ANONYMOUS_LABELS: Range<usize> = after(&SEMANTIC_LABELS, 8);
pub const VOCAB_SIZE: usize = ANONYMOUS_LABELS.end;

/// "Answer the question based on the given documents. The following are given documents."
pub const QA_PREAMBLE: [usize; 10] = word_seq([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
/// "Given a query, predict its intent. The examples are as follows:"
pub const ICL_PREAMBLE: [usize; 10] = word_seq([10, 11, 1, 12, 13, 14, 15, 5, 6, 9]);
/// Closed-book probe instructions; several paraphrases.
pub const PROBE_PREAMBLES: [[usize; 10]; 4] = [
    word_seq([0, 1, 2, 4, 10, 12, 13, 14, 15, 3]),
    word_seq([11, 0, 1, 2, 13, 5, 15, 8, 12, 6]),
    word_seq([14, 13, 0, 1, 2, 9, 7, 3, 10, 11]),
    word_seq([5, 6, 0, 1, 2, 15, 14, 12, 4, 8]),
];

const fn word_seq<const N: usize>(idx: [usize; N]) -> [usize; N] {
    let mut out = [0; N];
    let mut i = 0;
    while i < N {
        out[i] = WORDS.start + idx[i];
        i += 1;
    }
    out
}

pub fn relation(i: usize) -> usize {
    RELATIONS.start + i
}

pub fn n_relations() -> usize {
    RELATIONS.len()
}

pub fn n_values() -> usize {
    VALUES.len()
}

/// Signature tokens of template class `c`.
pub fn signature(c: usize) -> Range<usize> {
    let s = ICL_TOKENS.start + c * SIGNATURE_LEN;
    s..s + SIGNATURE_LEN
}

/// One memorizable fact `(entity, relation) → value`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fact {
    pub entity: usize,
    pub relation: usize,
    pub value: usize,
}

/// Seed of the fixed fact table; part of the corpus definition.
const FACT_TABLE_SEED: u64 = 0x5eed_fac7;

/// Every persistent entity with every relation, values fixed by a constant seed.
pub fn fact_table() -> Vec<Fact> {
    let mut rng = ChaCha8Rng::seed_from_u64(FACT_TABLE_SEED);
    let mut out = Vec::with_capacity(PERSISTENT_ENTITIES.len() * RELATIONS.len());
    for entity in PERSISTENT_ENTITIES {
        for relation in RELATIONS {
            out.push(Fact {
                entity,
                relation,
                value: rng.random_range(VALUES),
            });
        }
    }
    out
}

/// `k` distinct elements of `range` in random order.
pub(crate) fn sample_distinct(rng: &mut impl Rng, range: Range<usize>, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = range.collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}
