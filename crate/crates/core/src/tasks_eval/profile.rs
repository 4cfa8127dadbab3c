//! Position profile of the last token's retrieval weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::architecture::{Memory, Model, ModelKind, Source};
use crate::error::{Error, Result};
use crate::numerics::Graph;

/// Which retrievals enter the average.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileSelection {
    /// `None` selects every layer.
    pub layers: Option<Vec<usize>>,
    /// Memory read for mosaic models; ignored by the baseline.
    pub memory: Memory,
}

impl Default for ProfileSelection {
    fn default() -> Self {
        Self {
            layers: None,
            memory: Memory::Long,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub position: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProfile {
    pub rows: Vec<ProfileRow>,
    pub n_sequences: usize,
}

impl AttentionProfile {
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }

    /// Population variance of the mean profile over positions `< len - recent`.
    pub fn far_region_variance(&self, recent: usize) -> f64 {
        let end = self.rows.len().saturating_sub(recent);
        let far = &self.means()[..end];
        if far.is_empty() {
            return 0.0;
        }
        let mu = far.iter().sum::<f64>() / far.len() as f64;
        far.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / far.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Head-averaged weights of the last query over key positions, for one sequence.
pub fn last_token_weights(model: &Model, tokens: &[usize], sel: &ProfileSelection) -> Result<Vec<f64>> {
    let len = tokens.len();
    if len == 0 {
        return Err(Error::Input("empty sequence".into()));
    }
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g, false);
    let out = model.forward(&mut g, &vars, tokens, &vec![0; len], model.config().m_eval)?;
    let wanted = match model.kind() {
        ModelKind::Mosaic => Source::Memory(sel.memory),
        ModelKind::Rotary => Source::Attention,
    };
    let mut acc = vec![0.0; len];
    let mut n = 0usize;
    for r in &out.retrievals {
        let layer_ok = sel.layers.as_ref().is_none_or(|ls| ls.contains(&r.layer));
        if r.source != wanted || !layer_ok {
            continue;
        }
        let view = g
            .attention(r.node)
            .ok_or_else(|| Error::Input("retrieval node carries no weights".into()))?;
        let span = view.spans[len - 1].clone();
        for (p, w) in span.zip(view.row(len - 1)) {
            acc[p] += w;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input(format!("selection {sel:?} matches no retrieval")));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Mean and standard deviation over sequences of [`last_token_weights`].
/// All sequences must share one length.
pub fn attention_profile(model: &Model, sequences: &[Vec<usize>], sel: &ProfileSelection) -> Result<AttentionProfile> {
    let len = sequences
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::Input("no sequences".into()))?;
    if sequences.iter().any(|s| s.len() != len) {
        return Err(Error::Input("profile sequences must share one length".into()));
    }
    let mut sum = vec![0.0; len];
    let mut sq = vec![0.0; len];
    for s in sequences {
        for (p, w) in last_token_weights(model, s, sel)?.into_iter().enumerate() {
            sum[p] += w;
            sq[p] += w * w;
        }
    }
    let n = sequences.len() as f64;
    let rows = (0..len)
        .map(|p| {
            let mean = sum[p] / n;
            ProfileRow {
                position: p,
                mean,
                std: (sq[p] / n - mean * mean).max(0.0).sqrt(),
            }
        })
        .collect();
    Ok(AttentionProfile {
        rows,
        n_sequences: sequences.len(),
    })
}
