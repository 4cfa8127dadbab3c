//! Visibility of stored pairs per query position.
//!
//! Positions are 0-based here. For a query at `t` in a document starting at `s`:
//! short-term pairs are `max(t+1−h, s) .. t`, long-term pairs are `s ..= t−m`,
//! causal pairs (rotary baseline) are `s ..= t`. All are contiguous, so each is
//! stored as one range per query.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct MaskSet {
    pub short: Arc<Vec<Range<usize>>>,
    pub long: Arc<Vec<Range<usize>>>,
    pub causal: Arc<Vec<Range<usize>>>,
    /// First position of the document containing each position.
    pub doc_start: Vec<usize>,
    /// Set where a new document starts.
    pub resets: Arc<Vec<bool>>,
}

/// First position of each position's document; ids must form contiguous runs.
pub fn document_starts(doc_ids: &[usize]) -> Result<Vec<usize>> {
    let mut starts = Vec::with_capacity(doc_ids.len());
    let mut finished = std::collections::HashSet::new();
    let mut start = 0;
    for (t, &id) in doc_ids.iter().enumerate() {
        if t > 0 && id != doc_ids[t - 1] {
            finished.insert(doc_ids[t - 1]);
            if finished.contains(&id) {
                return Err(Error::Input(format!("document id {id} reappears at position {t}")));
            }
            start = t;
        }
        starts.push(start);
    }
    Ok(starts)
}

pub fn build_masks(seq_len: usize, h: usize, m: usize, doc_ids: &[usize]) -> Result<MaskSet> {
    if seq_len == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    if doc_ids.len() != seq_len {
        return Err(Error::Shape(format!("{} document ids for {seq_len} positions", doc_ids.len())));
    }
    if m == 0 || m > h {
        return Err(Error::Config(format!("long-term delay m = {m} must satisfy 1 ≤ m ≤ h = {h}")));
    }
    let doc_start = document_starts(doc_ids)?;
    let mut short = Vec::with_capacity(seq_len);
    let mut long = Vec::with_capacity(seq_len);
    let mut causal = Vec::with_capacity(seq_len);
    for (t, &s) in doc_start.iter().enumerate() {
        short.push((t + 1).saturating_sub(h).max(s)..t);
        let end = (t + 1).saturating_sub(m).max(s);
        long.push(s..end);
        causal.push(s..t + 1);
    }
    let resets = (0..seq_len).map(|t| doc_start[t] == t).collect();
    Ok(MaskSet {
        short: Arc::new(short),
        long: Arc::new(long),
        causal: Arc::new(causal),
        doc_start,
        resets: Arc::new(resets),
    })
}

/// Number of pairs in each range.
pub fn counts(spans: &[Range<usize>]) -> Vec<usize> {
    spans.iter().map(|s| s.len()).collect()
}

/// Dense `L×L` boolean matrix of a span mask.
pub fn dense(spans: &[Range<usize>]) -> Vec<Vec<bool>> {
    let l = spans.len();
    spans.iter().map(|s| (0..l).map(|i| s.contains(&i)).collect()).collect()
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.doc_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_start.is_empty()
    }
}
