use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Short- and long-term associative memories, no positional encoding.
    #[default]
    Mosaic,
    /// Multi-head attention with rotary position encoding.
    Rotary,
}

/// How the per-head short- and long-term outputs reach the output projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Concatenate all `2·n_heads` outputs.
    #[default]
    Concat,
    /// Add short and long output of each head, then concatenate heads.
    Sum,
}

/// Sharing of a small parameter set inside one memory of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Head,
    Layer,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

fn default_gamma_init() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Short-term window: pairs `T−h+1 ..= T−1` are visible.
    pub h: usize,
    /// Inclusive range of the long-term delay sampled during training.
    pub m_train_range: [usize; 2],
    pub m_eval: usize,
    /// Training context length; the mosaic forward itself has no length limit.
    pub max_seq_len: usize,
    pub ffn_hidden: usize,
    #[serde(default)]
    pub combine: Combine,
    #[serde(default)]
    pub bandwidth_scope: Scope,
    #[serde(default)]
    pub gamma_scope: Scope,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Std of the decay-gate weights `W_λ`; see the README for why this is not zero.
    #[serde(default = "default_init_std")]
    pub decay_gate_init_std: f64,
    #[serde(default = "default_gamma_init")]
    pub gamma_init: f64,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.ffn_hidden == 0 {
            return bad("d_model, n_heads, vocab_size and ffn_hidden must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        match self.kind {
            ModelKind::Mosaic => {
                let [lo, hi] = self.m_train_range;
                if lo == 0 || lo > hi || hi > self.h {
                    return bad(format!("m_train_range [{lo}, {hi}] must satisfy 1 ≤ m_lo ≤ m_hi ≤ h = {}", self.h));
                }
                if self.m_eval == 0 || self.m_eval >= self.h {
                    return bad(format!("m_eval {} must satisfy 1 ≤ m_eval < h = {}", self.m_eval, self.h));
                }
            }
            ModelKind::Rotary => {
                if self.d_head() % 2 != 0 {
                    return bad(format!("rotary heads need an even d_head, got {}", self.d_head()));
                }
            }
        }
        if !(self.init_std > 0.0 && self.decay_gate_init_std >= 0.0 && self.gamma_init.is_finite()) {
            return bad("initialization scales must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) fn tiny(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: 11,
        h: 4,
        m_train_range: [2, 4],
        m_eval: 2,
        max_seq_len: 16,
        ffn_hidden: 12,
        combine: Combine::Concat,
        bandwidth_scope: Scope::Head,
        gamma_scope: Scope::Head,
        rope_base: 10_000.0,
        init_std: 0.3,
        decay_gate_init_std: 0.3,
        gamma_init: 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        assert!(tiny(ModelKind::Mosaic).validate().is_ok());
        let mut c = tiny(ModelKind::Mosaic);
        c.m_eval = 4;
        assert!(c.validate().is_err());
        let mut c = tiny(ModelKind::Mosaic);
        c.m_train_range = [3, 5];
        assert!(c.validate().is_err());
        let mut c = tiny(ModelKind::Mosaic);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(ModelKind::Rotary);
        c.n_heads = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn serde_defaults() {
        let text = r#"{"n_layers":1,"d_model":4,"n_heads":1,"vocab_size":5,"h":4,
            "m_train_range":[1,4],"m_eval":2,"max_seq_len":8,"ffn_hidden":8}"#;
        let c: ModelConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.kind, ModelKind::Mosaic);
        assert_eq!(c.combine, Combine::Concat);
        assert_eq!(c.init_std, 0.02);
        assert!(serde_json::from_str::<ModelConfig>(&text.replace("\"h\"", "\"hh\"")).is_err());
    }
}
