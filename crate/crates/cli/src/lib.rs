//! Configuration handling and subcommands behind the `mosaics` binary.

pub mod commands;
pub mod config;

pub use commands::{
    ablate_model, cmd_ablate, cmd_analyze_attn, cmd_eval, cmd_flops, cmd_train, flops_table, icl_groups, load_checkpoint,
    profile_sequences, recorded_config, resolve_checkpoint, run_suite, AblationSummary, FlopsRow, ProfileSummary, Suite, TrainSummary,
};
pub use config::{apply_override, load_config, output_root, parse_config, under_root, RunConfig, OUT_ENV, RESOLVED_FILE};
