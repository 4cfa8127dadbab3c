use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use mosaics_cli::config::RunConfig;
use mosaics_cli::{
    cmd_ablate, cmd_analyze_attn, cmd_eval, cmd_flops, cmd_train, flops_table, load_config, recorded_config, under_root, Suite,
};
use mosaics_core::tasks_eval::LabelMode;

#[derive(Parser)]
#[command(name = "mosaics", version, about = "Train, evaluate and ablate memory mosaic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; evaluation commands default to the one
    /// recorded in the checkpoint's run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.d_model=64`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let path = self.config.as_ref().ok_or_else(|| anyhow!("--config is required"))?;
        load_config(path, &self.overrides, self.seed)
    }

    fn load_for(&self, checkpoint: &Path) -> Result<RunConfig> {
        if self.config.is_some() {
            return self.load();
        }
        let path = recorded_config(checkpoint)
            .ok_or_else(|| anyhow!("no --config given and none recorded near {}", checkpoint.display()))?;
        load_config(&path, &self.overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; outputs go to `out_dir` under $MOSAICS_OUT.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one task suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        label_mode: Option<LabelMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a mosaic with and without long-term memory; exits 1 when the gate fails.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit last-token position profiles.
    AnalyzeAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint profiled on the same sequences.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n_sequences: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print flops/token with and without long-term memory.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 256)]
        seq_len: usize,
    },
}

fn out_dir(out: &Option<PathBuf>, default: &str) -> PathBuf {
    under_root(out.as_deref().unwrap_or(Path::new(default)))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { cfg, resume } => {
            let s = cmd_train(&cfg.load()?, resume)?;
            println!("trained to step {} in {}", s.final_step, s.out_dir.display());
            if let Some(c) = s.checkpoint {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Eval { checkpoint, suite, cfg, label_mode, out } => {
            let out = out_dir(&out, &format!("eval_{}", suite.name()));
            let report = cmd_eval(&checkpoint, &cfg.load_for(&checkpoint)?, suite, label_mode, &out)?;
            print!("{}", report.summary_table());
            println!("report written to {}", out.display());
        }
        Command::Ablate { checkpoint, cfg, out } => {
            let out = out_dir(&out, "ablate");
            let s = cmd_ablate(&checkpoint, &cfg.load_for(&checkpoint)?, &out)?;
            println!("persistent: {:.3} -> {:.3} (shift {:.1} points)", s.persistent_full, s.persistent_stripped, s.persistent_shift);
            println!(
                "qa@{} far: {:.3} -> {:.3} (drop {:.1} points, chance {:.3})",
                s.qa_length, s.qa_full, s.qa_stripped, s.qa_drop, s.qa_chance
            );
            println!("params {} -> {}, flops/token {:.0} -> {:.0}", s.params_full, s.params_stripped, s.flops_full, s.flops_stripped);
            if !s.passed {
                eprintln!("ablation gate FAILED");
                return Ok(ExitCode::from(1));
            }
            println!("ablation gate passed");
        }
        Command::AnalyzeAttn { checkpoint, baseline, n_sequences, cfg, out } => {
            let out = out_dir(&out, "attn");
            let rows = cmd_analyze_attn(&checkpoint, baseline.as_deref(), &cfg.load_for(&checkpoint)?, n_sequences, &out)?;
            for r in rows {
                println!("{:<8} layer {:<4} {:<10} far variance {:.3e}", r.model, r.layer, r.memory, r.far_variance);
            }
        }
        Command::Flops { cfg, seq_len } => {
            print!("{}", flops_table(&cmd_flops(&cfg.load()?.model, seq_len)));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
