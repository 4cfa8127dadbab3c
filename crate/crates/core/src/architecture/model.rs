use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Combine, ModelConfig, ModelKind, Scope};
use super::masks::{build_masks, counts, MaskSet};
use super::params::{truncated_normal, ParamId, ParamKind, ParamStore};
use crate::assoc_memory::bandwidth_schedule;
use crate::error::{Error, Result};
use crate::extractors::{key_features_gated, value_features};
use crate::numerics::{rope_tables, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Memory {
    Short,
    Long,
}

impl Memory {
    pub fn name(self) -> &'static str {
        match self {
            Memory::Short => "short",
            Memory::Long => "long",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub w_phi: ParamId,
    pub w_g: ParamId,
    pub w_lambda: ParamId,
    pub w_psi: ParamId,
    pub gamma: ParamId,
    pub theta0: ParamId,
    pub theta1: ParamId,
    pub theta_alpha: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnHeadIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Memories { short: Vec<HeadIds>, long: Vec<HeadIds> },
    Attention(Vec<AttnHeadIds>),
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub attn_norm: ParamId,
    pub mixer: Mixer,
    pub w_out: ParamId,
    pub ffn_norm: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_norm: ParamId,
    pub unembed: ParamId,
}

/// Which memory or attention produced a recorded retrieval node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Memory(Memory),
    Attention,
}

/// Retrieval node of one head; its weights are readable via [`Graph::attention`].
#[derive(Clone, Copy, Debug)]
pub struct Retrieval {
    pub layer: usize,
    pub head: usize,
    pub source: Source,
    pub node: Var,
}

#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub retrievals: Vec<Retrieval>,
}

/// A decoder: mosaic or rotary baseline, with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    long_term: bool,
}

/// Parameter layout for `config`, filled by `fill(name, kind, shape)`.
fn build_layout(config: &ModelConfig, mut fill: impl FnMut(&str, ParamKind, &[usize], Init) -> ParamId) -> Layout {
    let (d, dh, hn, v, f) = (
        config.d_model,
        config.d_head(),
        config.n_heads,
        config.vocab_size,
        config.ffn_hidden,
    );
    let embed = fill("embed", ParamKind::Matrix, &[v, d], Init::Normal);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("layers.{l}");
        let attn_norm = fill(&format!("{p}.attn_norm"), ParamKind::Gain, &[d], Init::Ones);
        let (mixer, out_width) = match config.kind {
            ModelKind::Mosaic => {
                let mut memory = |mem: Memory| -> Vec<HeadIds> {
                    let q = format!("{p}.{}", mem.name());
                    let shared_bw = (config.bandwidth_scope == Scope::Layer).then(|| {
                        (
                            fill(&format!("{q}.theta0"), ParamKind::Scalar, &[1], Init::Zero),
                            fill(&format!("{q}.theta1"), ParamKind::Scalar, &[1], Init::Zero),
                            fill(&format!("{q}.theta_alpha"), ParamKind::Scalar, &[1], Init::Zero),
                        )
                    });
                    let shared_gamma = (config.gamma_scope == Scope::Layer)
                        .then(|| fill(&format!("{q}.gamma"), ParamKind::Scalar, &[1], Init::Gamma));
                    (0..hn)
                        .map(|h| {
                            let r = format!("{q}.{h}");
                            let w_phi = fill(&format!("{r}.w_phi"), ParamKind::Matrix, &[dh, d], Init::Normal);
                            let w_g = fill(&format!("{r}.w_g"), ParamKind::Matrix, &[1, d], Init::Zero);
                            let w_lambda = fill(&format!("{r}.w_lambda"), ParamKind::Matrix, &[1, d], Init::DecayGate);
                            let w_psi = fill(&format!("{r}.w_psi"), ParamKind::Matrix, &[dh, d], Init::Normal);
                            let gamma = shared_gamma
                                .unwrap_or_else(|| fill(&format!("{r}.gamma"), ParamKind::Scalar, &[1], Init::Gamma));
                            let (theta0, theta1, theta_alpha) = shared_bw.unwrap_or_else(|| {
                                (
                                    fill(&format!("{r}.theta0"), ParamKind::Scalar, &[1], Init::Zero),
                                    fill(&format!("{r}.theta1"), ParamKind::Scalar, &[1], Init::Zero),
                                    fill(&format!("{r}.theta_alpha"), ParamKind::Scalar, &[1], Init::Zero),
                                )
                            });
                            HeadIds {
                                w_phi,
                                w_g,
                                w_lambda,
                                w_psi,
                                gamma,
                                theta0,
                                theta1,
                                theta_alpha,
                            }
                        })
                        .collect()
                };
                let short = memory(Memory::Short);
                let long = memory(Memory::Long);
                let width = match config.combine {
                    Combine::Concat => 2 * hn * dh,
                    Combine::Sum => hn * dh,
                };
                (Mixer::Memories { short, long }, width)
            }
            ModelKind::Rotary => {
                let heads = (0..hn)
                    .map(|h| {
                        let r = format!("{p}.attn.{h}");
                        AttnHeadIds {
                            wq: fill(&format!("{r}.wq"), ParamKind::Matrix, &[dh, d], Init::Normal),
                            wk: fill(&format!("{r}.wk"), ParamKind::Matrix, &[dh, d], Init::Normal),
                            wv: fill(&format!("{r}.wv"), ParamKind::Matrix, &[dh, d], Init::Normal),
                        }
                    })
                    .collect();
                (Mixer::Attention(heads), hn * dh)
            }
        };
        let w_out = fill(&format!("{p}.w_out"), ParamKind::Matrix, &[d, out_width], Init::Normal);
        let ffn_norm = fill(&format!("{p}.ffn_norm"), ParamKind::Gain, &[d], Init::Ones);
        let w1 = fill(&format!("{p}.w1"), ParamKind::Matrix, &[f, d], Init::Normal);
        let w2 = fill(&format!("{p}.w2"), ParamKind::Matrix, &[d, f], Init::Normal);
        let w3 = fill(&format!("{p}.w3"), ParamKind::Matrix, &[f, d], Init::Normal);
        layers.push(LayerIds {
            attn_norm,
            mixer,
            w_out,
            ffn_norm,
            w1,
            w2,
            w3,
        });
    }
    let final_norm = fill("final_norm", ParamKind::Gain, &[d], Init::Ones);
    let unembed = fill("unembed", ParamKind::Matrix, &[v, d], Init::Normal);
    Layout {
        embed,
        layers,
        final_norm,
        unembed,
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    DecayGate,
    Zero,
    Ones,
    Gamma,
}

impl Model {
    /// Freshly initialized weights; deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let layout = build_layout(&config, |name, kind, shape, init| {
            let value = match init {
                Init::Normal => truncated_normal(&mut rng, shape, config.init_std),
                Init::DecayGate => truncated_normal(&mut rng, shape, config.decay_gate_init_std),
                Init::Zero => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Gamma => Tensor::full(shape, config.gamma_init),
            };
            params.push(name, kind, value)
        });
        Ok(Self {
            config,
            params,
            layout,
            long_term: true,
        })
    }

    /// Rebuilds a model around existing parameter values, matched by name.
    pub fn from_named(config: ModelConfig, mut lookup: impl FnMut(&str, &[usize]) -> Result<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut failure = None;
        let layout = build_layout(&config, |name, kind, shape, _| {
            let value = match lookup(name, shape) {
                Ok(t) if t.shape() == shape => t,
                Ok(t) => {
                    failure.get_or_insert(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                    Tensor::zeros(shape)
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    Tensor::zeros(shape)
                }
            };
            params.push(name, kind, value)
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(Self {
            config,
            params,
            layout,
            long_term: true,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn long_term_enabled(&self) -> bool {
        self.long_term
    }

    pub(crate) fn set_long_term(&mut self, on: bool) {
        self.long_term = on;
    }

    /// Differentiable forward pass over one packed row.
    ///
    /// `vars` are the bound parameters (see [`ParamStore::bind`]); `doc_ids`
    /// restricts retrieval to the query's own document; `m` is the long-term delay.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], tokens: &[usize], doc_ids: &[usize], m: usize) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!("{} bound vars for {} parameters", vars.len(), self.params.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let len = tokens.len();
        let masks = match self.config.kind {
            ModelKind::Mosaic => build_masks(len, self.config.h, m, doc_ids)?,
            // the baseline only reads the causal spans
            ModelKind::Rotary => build_masks(len, 1, 1, doc_ids)?,
        };
        let p = |id: ParamId| vars[id.0];
        let mut x = g.gather(p(self.layout.embed), tokens)?;
        let mut retrievals = Vec::new();
        for l in 0..self.layout.layers.len() {
            let layer = &self.layout.layers[l];
            x = self.memory_unit_forward(g, vars, l, x, &masks, &mut retrievals)?;
            x = persistent_block(g, x, p(layer.ffn_norm), p(layer.w1), p(layer.w2), p(layer.w3))?;
        }
        let xf = g.rms_norm(x, p(self.layout.final_norm))?;
        let logits = g.matmul_nt(xf, p(self.layout.unembed))?;
        Ok(Forward { logits, retrievals })
    }

    /// Mixing sub-block of layer `l` with its residual: `x + W_out·mix(x̂)`.
    ///
    /// For the mosaic this is the memory unit (short- and long-term memories
    /// per head); for the baseline, rotary multi-head attention.
    pub fn memory_unit_forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        l: usize,
        x: Var,
        masks: &MaskSet,
        retrievals: &mut Vec<Retrieval>,
    ) -> Result<Var> {
        let p = |id: ParamId| vars[id.0];
        let layer = &self.layout.layers[l];
        let len = masks.len();
        let dh = self.config.d_head();
        let xn = g.rms_norm(x, p(layer.attn_norm))?;
        let mixed = match &layer.mixer {
            Mixer::Memories { short, long } => {
                let mut run = |g: &mut Graph, mem: Memory, heads: &[HeadIds]| -> Result<Vec<Var>> {
                    let spans = match mem {
                        Memory::Short => masks.short.clone(),
                        Memory::Long => masks.long.clone(),
                    };
                    let n = counts(&spans);
                    let mut outs = Vec::with_capacity(heads.len());
                    for (hi, head) in heads.iter().enumerate() {
                        let o = head_retrieval(g, &p, xn, head, masks, &spans, &n)?;
                        retrievals.push(Retrieval {
                            layer: l,
                            head: hi,
                            source: Source::Memory(mem),
                            node: o,
                        });
                        outs.push(o);
                    }
                    Ok(outs)
                };
                let short_out = run(g, Memory::Short, short)?;
                let long_out = if self.long_term {
                    Some(run(g, Memory::Long, long)?)
                } else {
                    None
                };
                match self.config.combine {
                    Combine::Concat => {
                        let mut parts = short_out;
                        match long_out {
                            Some(l) => parts.extend(l),
                            None => parts.push(g.constant(Tensor::zeros(&[len, long.len() * dh]))),
                        }
                        g.concat(&parts, 1)?
                    }
                    Combine::Sum => {
                        let parts = match long_out {
                            Some(l) => short_out
                                .into_iter()
                                .zip(l)
                                .map(|(s, l)| g.add(s, l))
                                .collect::<Result<Vec<_>>>()?,
                            None => short_out,
                        };
                        g.concat(&parts, 1)?
                    }
                }
            }
            Mixer::Attention(heads) => {
                let positions: Vec<usize> = (0..len).map(|t| t - masks.doc_start[t]).collect();
                let (cos, sin) = rope_tables(&positions, dh, self.config.rope_base);
                let (cos, sin) = (Arc::new(cos), Arc::new(sin));
                let scale = g.constant(Tensor::full(&[len], 1.0 / (dh as f64).sqrt()));
                let mut outs = Vec::with_capacity(heads.len());
                for (hi, head) in heads.iter().enumerate() {
                    let q = g.matmul_nt(xn, p(head.wq))?;
                    let k = g.matmul_nt(xn, p(head.wk))?;
                    let v = g.matmul_nt(xn, p(head.wv))?;
                    let q = g.rope(q, cos.clone(), sin.clone())?;
                    let k = g.rope(k, cos.clone(), sin.clone())?;
                    let o = g.span_attention(q, k, v, scale, masks.causal.clone())?;
                    retrievals.push(Retrieval {
                        layer: l,
                        head: hi,
                        source: Source::Attention,
                        node: o,
                    });
                    outs.push(o);
                }
                g.concat(&outs, 1)?
            }
        };
        let projected = g.matmul_nt(mixed, p(layer.w_out))?;
        g.add(x, projected)
    }

    /// Logits for one sequence without gradient bookkeeping.
    pub fn logits(&self, tokens: &[usize], doc_ids: &[usize], m: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, tokens, doc_ids, m)?;
        Ok(g.value(out.logits).clone())
    }

    /// Logits for a single-document sequence at the evaluation delay.
    pub fn eval_logits(&self, tokens: &[usize]) -> Result<Tensor> {
        self.logits(tokens, &vec![0; tokens.len()], self.config.m_eval)
    }

    /// Number of parameters that can influence the output.
    pub fn active_param_count(&self) -> usize {
        let total = self.params.numel();
        if self.long_term || self.config.kind != ModelKind::Mosaic {
            return total;
        }
        let mut removed = 0;
        let mut seen = std::collections::HashSet::new();
        for layer in &self.layout.layers {
            if let Mixer::Memories { long, .. } = &layer.mixer {
                for head in long {
                    for id in [
                        head.w_phi,
                        head.w_g,
                        head.w_lambda,
                        head.w_psi,
                        head.gamma,
                        head.theta0,
                        head.theta1,
                        head.theta_alpha,
                    ] {
                        if seen.insert(id) {
                            removed += self.params.get(id).len();
                        }
                    }
                }
                if self.config.combine == Combine::Concat {
                    removed += self.config.d_model * long.len() * self.config.d_head();
                }
            }
        }
        total - removed
    }
}

/// One head's kernel retrieval: keys double as queries.
fn head_retrieval(
    g: &mut Graph,
    p: &impl Fn(ParamId) -> Var,
    xn: Var,
    head: &HeadIds,
    masks: &MaskSet,
    spans: &Arc<Vec<std::ops::Range<usize>>>,
    n: &[usize],
) -> Result<Var> {
    let k = key_features_gated(g, xn, p(head.w_phi), p(head.w_g), p(head.w_lambda), masks.resets.clone())?;
    let v = value_features(g, xn, p(head.w_psi), p(head.gamma), &masks.resets)?;
    let beta = bandwidth_schedule(g, n, p(head.theta0), p(head.theta1), p(head.theta_alpha))?;
    g.span_attention(k, k, v, beta, spans.clone())
}

/// Pre-normalized SwiGLU block with residual: `x + W₂(SiLU(W₁x̂) ⊙ W₃x̂)`.
pub fn persistent_block(g: &mut Graph, x: Var, norm: Var, w1: Var, w2: Var, w3: Var) -> Result<Var> {
    let xn = g.rms_norm(x, norm)?;
    let a = g.matmul_nt(xn, w1)?;
    let b = g.matmul_nt(xn, w3)?;
    let act = g.silu(a);
    let hidden = g.mul(act, b)?;
    let out = g.matmul_nt(hidden, w2)?;
    g.add(x, out)
}
