//! Analytic forward cost per token.

use serde::Serialize;

use super::config::{Combine, ModelConfig, ModelKind};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsEstimate {
    pub seq_len: usize,
    /// `2 × (weights used in matrix products)`, per token.
    pub matmul: f64,
    /// `Σ_T Σ_layers Σ_(head, memory) 2·n_visible(T)·d_head / seq_len`.
    pub retrieval: f64,
    pub total: f64,
}

pub const FLOPS_FORMULA: &str = "flops/token = 2*matmul_weights + sum_T sum_layers sum_(head,memory) 2*n_visible(T)*d_head / seq_len; \
embedding lookups count zero; n_visible uses m = m_eval";

/// Weights taking part in matrix products for one token.
pub fn matmul_weights(config: &ModelConfig, long_term: bool) -> usize {
    let (d, dh, hn, f) = (config.d_model, config.d_head(), config.n_heads, config.ffn_hidden);
    let per_layer = match config.kind {
        ModelKind::Mosaic => {
            let memories = if long_term { 2 } else { 1 };
            // W_φ and W_ψ (d_head×d) plus the two gate rows (1×d)
            let extract = memories * hn * (2 * dh * d + 2 * d);
            let out_width = match (config.combine, long_term) {
                (Combine::Concat, true) => 2 * hn * dh,
                _ => hn * dh,
            };
            extract + d * out_width
        }
        ModelKind::Rotary => 3 * hn * dh * d + d * hn * dh,
    };
    config.n_layers * (per_layer + 3 * d * f) + config.vocab_size * d
}

pub fn estimate_flops(config: &ModelConfig, seq_len: usize, long_term: bool) -> FlopsEstimate {
    let seq_len = seq_len.max(1);
    let dh = config.d_head() as f64;
    let mut visible = 0usize;
    for t in 0..seq_len {
        visible += match config.kind {
            ModelKind::Mosaic => {
                let short = t.min(config.h.saturating_sub(1));
                let long = if long_term { (t + 1).saturating_sub(config.m_eval) } else { 0 };
                short + long
            }
            ModelKind::Rotary => t + 1,
        };
    }
    let retrieval = (config.n_layers * config.n_heads) as f64 * 2.0 * visible as f64 * dh / seq_len as f64;
    let matmul = 2.0 * matmul_weights(config, long_term) as f64;
    FlopsEstimate {
        seq_len,
        matmul,
        retrieval,
        total: matmul + retrieval,
    }
}
