//! Documents, tokenizers and row packing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Ids below this are reserved for the markers above.
pub const FIRST_FREE_ID: usize = 3;

/// Yields tokenized documents (without begin/end markers).
pub trait DocumentSource {
    /// `None` when a finite source is exhausted.
    fn next_document(&mut self) -> Result<Option<Vec<usize>>>;
}

/// Byte-level tokenizer: byte `b` maps to id `3 + b`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = FIRST_FREE_ID + 256;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(|b| FIRST_FREE_ID + b as usize).collect()
    }

    /// Markers and out-of-range ids are dropped; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&i| (FIRST_FREE_ID..Self::VOCAB_SIZE).contains(&i))
            .map(|&i| (i - FIRST_FREE_ID) as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Documents held in memory, replayed in order; `cycle` restarts at the end.
#[derive(Clone, Debug)]
pub struct VecSource {
    docs: Vec<Vec<usize>>,
    next: usize,
    cycle: bool,
}

impl VecSource {
    pub fn new(docs: Vec<Vec<usize>>, cycle: bool) -> Self {
        Self { docs, next: 0, cycle }
    }

    /// One document per non-empty line of whitespace-separated token ids.
    pub fn from_token_file(path: &Path, cycle: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut docs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc = line
                .split_whitespace()
                .map(|w| {
                    w.parse::<usize>()
                        .map_err(|_| Error::Input(format!("{}:{}: bad token id {w:?}", path.display(), n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            docs.push(doc);
        }
        Ok(Self::new(docs, cycle))
    }

    /// UTF-8 text split into documents at blank lines, byte-tokenized.
    pub fn from_text_file(path: &Path, cycle: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tok = ByteTokenizer;
        let docs = text
            .split("\n\n")
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .map(|d| tok.encode(d))
            .collect();
        Ok(Self::new(docs, cycle))
    }
}

impl DocumentSource for VecSource {
    fn next_document(&mut self) -> Result<Option<Vec<usize>>> {
        if self.next == self.docs.len() {
            if !self.cycle || self.docs.is_empty() {
                return Ok(None);
            }
            self.next = 0;
        }
        self.next += 1;
        Ok(Some(self.docs[self.next - 1].clone()))
    }
}

/// One training row: tokens, per-position document ids and next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub tokens: Vec<usize>,
    pub doc_ids: Vec<usize>,
    /// `None` at the last position of each document and on padding.
    pub targets: Vec<Option<usize>>,
}

impl Row {
    pub fn n_targets(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Packs whole documents, each wrapped as `BOS doc EOS`, into fixed-length rows.
///
/// A document that does not fit the rest of the current row starts the next
/// row, and the remainder is padded. Documents longer than a row are truncated.
#[derive(Debug)]
pub struct Packer {
    seq_len: usize,
    pending: Option<Vec<usize>>,
}

impl Packer {
    pub fn new(seq_len: usize) -> Self {
        Self { seq_len, pending: None }
    }

    /// Next row, or `None` once the source is exhausted and nothing is pending.
    pub fn next_row(&mut self, source: &mut dyn DocumentSource) -> Result<Option<Row>> {
        let mut tokens = Vec::with_capacity(self.seq_len);
        let mut doc_ids = Vec::with_capacity(self.seq_len);
        let mut targets = Vec::with_capacity(self.seq_len);
        let mut doc = 0;
        loop {
            let item = match self.pending.take() {
                Some(d) => d,
                None => match source.next_document()? {
                    Some(d) => {
                        let mut w = Vec::with_capacity(d.len() + 2);
                        w.push(BOS);
                        w.extend(d);
                        w.push(EOS);
                        w.truncate(self.seq_len);
                        w
                    }
                    None => break,
                },
            };
            if tokens.len() + item.len() > self.seq_len {
                self.pending = Some(item);
                break;
            }
            for (i, &t) in item.iter().enumerate() {
                tokens.push(t);
                doc_ids.push(doc);
                targets.push(item.get(i + 1).copied());
            }
            doc += 1;
            if tokens.len() == self.seq_len {
                break;
            }
        }
        if tokens.is_empty() {
            return Ok(None);
        }
        while tokens.len() < self.seq_len {
            tokens.push(PAD);
            doc_ids.push(doc);
            targets.push(None);
        }
        Ok(Some(Row { tokens, doc_ids, targets }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packs_whole_documents_with_markers() {
        let mut src = VecSource::new(vec![vec![5, 6], vec![7, 8, 9], vec![10]], false);
        let mut p = Packer::new(8);
        let r = p.next_row(&mut src).unwrap().unwrap();
        assert_eq!(r.tokens, vec![BOS, 5, 6, EOS, PAD, PAD, PAD, PAD]);
        assert_eq!(r.doc_ids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(r.targets, vec![Some(5), Some(6), Some(EOS), None, None, None, None, None]);
        let r = p.next_row(&mut src).unwrap().unwrap();
        assert_eq!(r.tokens, vec![BOS, 7, 8, 9, EOS, BOS, 10, EOS]);
        assert_eq!(r.n_targets(), 6);
        assert!(p.next_row(&mut src).unwrap().is_none());
    }

    #[test]
    fn truncates_long_documents() {
        let mut src = VecSource::new(vec![(3..20).collect()], false);
        let r = Packer::new(6).next_row(&mut src).unwrap().unwrap();
        assert_eq!(r.tokens, vec![BOS, 3, 4, 5, 6, 7]);
        assert_eq!(r.targets[5], None);
    }

    #[test]
    fn byte_tokenizer_round_trip() {
        let t = ByteTokenizer;
        let ids = t.encode("héllo");
        assert!(ids.iter().all(|&i| i >= FIRST_FREE_ID && i < ByteTokenizer::VOCAB_SIZE));
        assert_eq!(t.decode(&ids), "héllo");
    }

    #[test]
    fn token_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.txt");
        fs::write(&path, "3 4 5\n\n6 7\n").unwrap();
        let mut src = VecSource::from_token_file(&path, true).unwrap();
        assert_eq!(src.next_document().unwrap(), Some(vec![3, 4, 5]));
        assert_eq!(src.next_document().unwrap(), Some(vec![6, 7]));
        assert_eq!(src.next_document().unwrap(), Some(vec![3, 4, 5]));
        fs::write(&path, "3 x\n").unwrap();
        assert!(VecSource::from_token_file(&path, false).is_err());
    }
}
