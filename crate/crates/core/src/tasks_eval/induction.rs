//! Induction sequences: predict `b` after `… a b … a`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{DocumentSource, FIRST_FREE_ID};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionTask {
    pub tokens: Vec<usize>,
    /// `(i, b)`: the token after position `i` must be `b`.
    pub eval: Vec<(usize, usize)>,
}

/// Sequence of `(a, b)` pairs; triggers come from the lower half of the free
/// ids and continuations from the upper half, and each trigger keeps the
/// continuation drawn at its first occurrence.
pub fn gen_induction_task(rng: &mut impl Rng, vocab: usize, seq_len: usize) -> Result<InductionTask> {
    let free = vocab.saturating_sub(FIRST_FREE_ID);
    if free < 2 {
        return Err(Error::Config(format!("vocab {vocab} leaves fewer than 2 free ids")));
    }
    if seq_len < 2 {
        return Err(Error::Config("induction sequences need at least one pair".into()));
    }
    let n_trig = free / 2;
    let cont = FIRST_FREE_ID + n_trig..vocab;
    let mut map = vec![None; n_trig];
    let mut tokens = Vec::with_capacity(seq_len);
    let mut eval = Vec::new();
    while tokens.len() + 2 <= seq_len {
        let a = rng.random_range(0..n_trig);
        let b = match map[a] {
            Some(b) => {
                eval.push((tokens.len(), b));
                b
            }
            None => {
                let b = rng.random_range(cont.clone());
                map[a] = Some(b);
                b
            }
        };
        tokens.push(FIRST_FREE_ID + a);
        tokens.push(b);
    }
    Ok(InductionTask { tokens, eval })
}

/// Exact-match lookup: the token following the latest earlier copy of the
/// current token.
pub fn induction_oracle(tokens: &[usize], i: usize) -> Option<usize> {
    (0..i).rev().find(|&j| tokens[j] == tokens[i]).map(|j| tokens[j + 1])
}

/// Endless stream of induction sequences for training.
pub struct InductionSource<R> {
    pub rng: R,
    pub vocab: usize,
    pub seq_len: usize,
}

impl<R: Rng> DocumentSource for InductionSource<R> {
    fn next_document(&mut self) -> Result<Option<Vec<usize>>> {
        Ok(Some(gen_induction_task(&mut self.rng, self.vocab, self.seq_len)?.tokens))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn second_occurrence_is_evaluated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = gen_induction_task(&mut rng, 13, 40).unwrap();
        assert_eq!(t.tokens.len(), 40);
        assert!(!t.eval.is_empty());
        for &(i, b) in &t.eval {
            assert_eq!(t.tokens[i + 1], b);
            assert!(t.tokens[..i].contains(&t.tokens[i]));
            assert_eq!(induction_oracle(&t.tokens, i), Some(b));
        }
        // first occurrences are never evaluated
        for i in (0..40).step_by(2) {
            if !t.tokens[..i].contains(&t.tokens[i]) {
                assert!(t.eval.iter().all(|&(j, _)| j != i));
            }
        }
    }

    #[test]
    fn oracle_on_handwritten_sequence() {
        // [a b c d a] → b
        let s = [3, 4, 5, 6, 3];
        assert_eq!(induction_oracle(&s, 4), Some(4));
        assert_eq!(induction_oracle(&s, 2), None);
    }

    #[test]
    fn rejects_tiny_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gen_induction_task(&mut rng, 4, 10).is_err());
    }
}
