//! Next-token training: schedule, AdamW, clipping, packing and the loop.

mod config;
mod data;
mod optim;
mod trainer;

pub use config::{lr_at, TrainConfig};
pub use data::{ByteTokenizer, DocumentSource, Packer, Row, VecSource, BOS, EOS, FIRST_FREE_ID, PAD};
pub use optim::{adamw_step, clip_grad_norm, decays, global_norm, OptimizerState};
pub use trainer::{
    batch_gradients, document_losses, latest_checkpoint, read_metrics, sample_m, train_loop, MetricRow, Phase,
    RunOutput, TrainOutcome, CHECKPOINT_DIR, METRICS_FILE,
};
