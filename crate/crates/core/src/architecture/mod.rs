//! Decoder assembly: memory units, persistent memory, masks, ablation and cost.

mod ablation;
mod checkpoint;
mod config;
mod flops;
mod masks;
mod model;
mod params;

pub use ablation::{restore_long_term, strip_long_term, LongTermBackup};
pub use checkpoint::{
    load_model, read_checkpoint_config, save_model, write_dir_atomic, write_model_files, CheckpointConfig, CONFIG_FILE,
};
pub use config::{Combine, ModelConfig, ModelKind, Scope};
pub use flops::{estimate_flops, matmul_weights, FlopsEstimate, FLOPS_FORMULA};
pub use masks::{build_masks, counts, dense, document_starts, MaskSet};
pub use model::{
    persistent_block, AttnHeadIds, Forward, HeadIds, LayerIds, Layout, Memory, Mixer, Model, Retrieval, Source,
};
pub use params::{truncated_normal, Param, ParamId, ParamKind, ParamStore};
