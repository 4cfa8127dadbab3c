//! Subcommand bodies; each returns its results and writes files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mosaics_core::architecture::{estimate_flops, load_model, strip_long_term, Memory, ModelKind};
use mosaics_core::tasks_eval::vocab::VOCAB_SIZE;
use mosaics_core::tasks_eval::{
    attention_profile, eval_extrapolation, eval_icl, eval_persistent_knowledge, eval_qa, gen_icl_classification,
    persistent_probes, stream_windows, qa_probes_at_length, EvalReport, IclTask, LabelMode,
    Placement, ProfileSelection, PromptSpec, SyntheticCorpus,
};
use mosaics_core::training::{latest_checkpoint, train_loop, DocumentSource, RunOutput, VecSource};
use mosaics_core::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{under_root, write_resolved, DataSource, RunConfig, RESOLVED_FILE};

/// Offsets separating the streams derived from one run seed.
const DATA_STREAM: u64 = 1;
const ICL_STREAM: u64 = 2;
const QA_STREAM: u64 = 3;
const PROFILE_STREAM: u64 = 4;

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Icl,
    Qa,
    Persistent,
    Extrapolate,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Icl => "icl",
            Suite::Qa => "qa",
            Suite::Persistent => "persistent",
            Suite::Extrapolate => "extrapolate",
        }
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub final_step: usize,
    pub checkpoint: Option<PathBuf>,
    pub last_loss: Option<f64>,
}

fn data_source(cfg: &RunConfig) -> Result<Box<dyn DocumentSource>> {
    let path = || cfg.data.path.clone().expect("validated: non-synthetic source has a path");
    Ok(match cfg.data.source {
        DataSource::Synthetic => {
            if cfg.model.vocab_size < VOCAB_SIZE {
                bail!("synthetic corpus needs model.vocab_size >= {VOCAB_SIZE}, got {}", cfg.model.vocab_size);
            }
            Box::new(SyntheticCorpus::new(cfg.data.corpus.clone(), sub_seed(cfg.seed, DATA_STREAM))?)
        }
        DataSource::Tokens => Box::new(VecSource::from_token_file(&path(), true)?),
        DataSource::Text => Box::new(VecSource::from_text_file(&path(), true)?),
    })
}

/// Trains from scratch, or from the latest checkpoint under the output
/// directory with `resume`.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let out = under_root(&cfg.out_dir);
    write_resolved(&out, cfg)?;
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut source = data_source(cfg)?;
    log::info!("training {:?} into {}", cfg.model.kind, out.display());
    let outcome = train_loop(&mut model, source.as_mut(), &cfg.train, Some(RunOutput { dir: &out, resume }))?;
    Ok(TrainSummary {
        out_dir: out,
        final_step: outcome.final_step,
        checkpoint: outcome.checkpoints.last().cloned(),
        last_loss: outcome.metrics.last().map(|r| r.loss),
    })
}

/// A checkpoint directory, or a run directory whose latest checkpoint is used.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("config.json").is_file() {
        return Ok(path.to_path_buf());
    }
    if let Some((_, dir)) = latest_checkpoint(path) {
        return Ok(dir);
    }
    bail!("{} is neither a checkpoint nor a run directory with checkpoints", path.display())
}

/// The resolved config of the run a checkpoint (or run directory) belongs to.
pub fn recorded_config(path: &Path) -> Option<PathBuf> {
    path.ancestors()
        .take(3)
        .map(|p| p.join(RESOLVED_FILE))
        .find(|p| p.is_file())
}

pub fn load_checkpoint(path: &Path) -> Result<(PathBuf, Model)> {
    let dir = resolve_checkpoint(path)?;
    let model = load_model(&dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))?;
    Ok((dir, model))
}

fn tag(model: &Model) -> &'static str {
    match model.kind() {
        ModelKind::Mosaic => "mosaic",
        ModelKind::Rotary => "rotary",
    }
}

/// Replaces the model section with the evaluated checkpoint's and writes the result.
fn record(cfg: &RunConfig, model: &ModelConfig, out: &Path) -> Result<()> {
    let mut resolved = cfg.clone();
    resolved.model = model.clone();
    write_resolved(out, &resolved)?;
    Ok(())
}

pub fn icl_groups(cfg: &RunConfig, mode: LabelMode) -> Result<Vec<(usize, Vec<IclTask>)>> {
    let e = &cfg.eval;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, ICL_STREAM));
    e.shots
        .iter()
        .map(|&s| {
            let tasks = (0..e.n_tasks)
                .map(|_| gen_icl_classification(&mut rng, e.n_classes, s, mode))
                .collect::<mosaics_core::Result<Vec<_>>>()?;
            Ok((s, tasks))
        })
        .collect()
}

/// Runs one suite; `label_mode` overrides the configured mode.
pub fn run_suite(model: &Model, cfg: &RunConfig, suite: Suite, label_mode: Option<LabelMode>) -> Result<EvalReport> {
    let e = &cfg.eval;
    let l = model.config().max_seq_len;
    let t = tag(model);
    Ok(match suite {
        Suite::Icl => {
            let mode = label_mode.unwrap_or(e.label_mode);
            eval_icl(model, t, "icl", &icl_groups(cfg, mode)?, &PromptSpec::variants(mode))?
        }
        Suite::Qa => {
            let len = e.qa_length.unwrap_or(l);
            let probes = qa_probes_at_length(sub_seed(cfg.seed, QA_STREAM), len, e.qa_doc_len, e.qa_n, Placement::Uniform)?;
            eval_qa(model, t, "qa", &probes)?
        }
        Suite::Persistent => eval_persistent_knowledge(model, t, &persistent_probes())?,
        Suite::Extrapolate => {
            let lengths: Vec<usize> = e.extrapolate_factors.iter().map(|f| f * l).collect();
            eval_extrapolation(model, t, &lengths, sub_seed(cfg.seed, QA_STREAM), e.qa_doc_len, e.qa_n)?
        }
    })
}

/// Evaluates a checkpoint; writes `report.csv`, `details.csv` and the resolved config.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, suite: Suite, label_mode: Option<LabelMode>, out: &Path) -> Result<EvalReport> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let mut cfg = cfg.clone();
    if let Some(m) = label_mode {
        cfg.eval.label_mode = m;
    }
    let report = run_suite(&model, &cfg, suite, None)?;
    record(&cfg, model.config(), out)?;
    report.write_csv(&out.join("report.csv"))?;
    report.write_details_csv(&out.join("details.csv"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub persistent_full: f64,
    pub persistent_stripped: f64,
    pub qa_length: usize,
    pub qa_full: f64,
    pub qa_stripped: f64,
    pub qa_chance: f64,
    pub params_full: usize,
    pub params_stripped: usize,
    pub flops_full: f64,
    pub flops_stripped: f64,
    /// Points, `|stripped − full|`.
    pub persistent_shift: f64,
    /// Points, `full − stripped`.
    pub qa_drop: f64,
    pub passed: bool,
}

fn acc_of(report: &EvalReport) -> f64 {
    let n: usize = report.rows.iter().map(|r| r.n_eval).sum();
    let hits: f64 = report.rows.iter().map(|r| r.accuracy * r.n_eval as f64).sum();
    if n == 0 {
        0.0
    } else {
        hits / n as f64
    }
}

/// Scores a mosaic with and without long-term memory; the gate passes when
/// persistent probes barely move while far-context QA collapses.
pub fn ablate_model(model: &Model, cfg: &RunConfig) -> Result<(AblationSummary, EvalReport)> {
    if model.kind() != ModelKind::Mosaic {
        bail!("ablation needs a mosaic checkpoint");
    }
    let e = &cfg.eval;
    let (stripped, _) = strip_long_term(model)?;
    let h = model.config().h;
    let qa_length = e.ablate_window_factor * h;
    let probes = qa_probes_at_length(sub_seed(cfg.seed, QA_STREAM), qa_length, e.qa_doc_len, e.qa_n, Placement::AtLeast(h))?;
    let pers = persistent_probes();
    let mut report = EvalReport::default();
    let mut scores = Vec::new();
    for (m, name) in [(model, "full"), (&stripped, "stripped")] {
        let p = eval_persistent_knowledge(m, name, &pers)?;
        let q = eval_qa(m, name, "qa_far", &probes)?;
        scores.push((acc_of(&p), acc_of(&q)));
        report.extend(p);
        report.extend(q);
    }
    let l = model.config().max_seq_len;
    let persistent_shift = 100.0 * (scores[1].0 - scores[0].0).abs();
    let qa_drop = 100.0 * (scores[0].1 - scores[1].1);
    let summary = AblationSummary {
        persistent_full: scores[0].0,
        persistent_stripped: scores[1].0,
        qa_length,
        qa_full: scores[0].1,
        qa_stripped: scores[1].1,
        qa_chance: 1.0 / probes.first().map_or(1, |p| p.candidates.len()) as f64,
        params_full: model.active_param_count(),
        params_stripped: stripped.active_param_count(),
        flops_full: estimate_flops(model.config(), l, true).total,
        flops_stripped: estimate_flops(model.config(), l, false).total,
        persistent_shift,
        qa_drop,
        passed: persistent_shift < e.ablate_max_persistent_shift && qa_drop > e.ablate_min_qa_drop,
    };
    Ok((summary, report))
}

/// Writes `ablation.csv`, `ablation.json` and the resolved config.
pub fn cmd_ablate(checkpoint: &Path, cfg: &RunConfig, out: &Path) -> Result<AblationSummary> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let (summary, report) = ablate_model(&model, cfg)?;
    record(cfg, model.config(), out)?;
    report.write_csv(&out.join("ablation.csv"))?;
    let path = out.join("ablation.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileSummary {
    pub model: String,
    /// `all` or a layer index.
    pub layer: String,
    pub memory: String,
    pub far_variance: f64,
    pub file: String,
}

/// Held-out windows of the configured synthetic corpus, `len` tokens each.
pub fn profile_sequences(cfg: &RunConfig, len: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    let mut src = SyntheticCorpus::new(cfg.data.corpus.clone(), sub_seed(cfg.seed, PROFILE_STREAM))?;
    Ok(stream_windows(&mut src, len, n)?)
}

fn profile_model(model: &Model, seqs: &[Vec<usize>], recent: usize, out: &Path) -> Result<Vec<ProfileSummary>> {
    let t = tag(model);
    let memories: &[Option<Memory>] = match model.kind() {
        ModelKind::Mosaic => &[Some(Memory::Long), Some(Memory::Short)],
        ModelKind::Rotary => &[None],
    };
    let mut layers: Vec<Option<usize>> = vec![None];
    layers.extend((0..model.config().n_layers).map(Some));
    let mut rows = Vec::new();
    for &mem in memories {
        for &layer in &layers {
            let sel = ProfileSelection {
                layers: layer.map(|l| vec![l]),
                memory: mem.unwrap_or(Memory::Long),
            };
            let p = attention_profile(model, seqs, &sel)?;
            let layer_name = layer.map_or("all".to_string(), |l| l.to_string());
            let mem_name = mem.map_or("attention", |m| m.name());
            let file = format!("profile_{t}_layer-{layer_name}_{mem_name}.csv");
            p.write_csv(&out.join(&file))?;
            rows.push(ProfileSummary {
                model: t.into(),
                layer: layer_name,
                memory: mem_name.into(),
                far_variance: p.far_region_variance(recent),
                file,
            });
        }
    }
    Ok(rows)
}

/// Position profiles of the last token's weights, per layer and memory, for
/// the checkpoint and an optional baseline on the same sequences. The far
/// region excludes the last `h` positions of the first model.
pub fn cmd_analyze_attn(
    checkpoint: &Path,
    baseline: Option<&Path>,
    cfg: &RunConfig,
    n_sequences: usize,
    out: &Path,
) -> Result<Vec<ProfileSummary>> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let mut models = vec![model];
    if let Some(b) = baseline {
        models.push(load_checkpoint(b)?.1);
    }
    let len = models[0].config().max_seq_len;
    let recent = models[0].config().h;
    let seqs = profile_sequences(cfg, len, n_sequences)?;
    record(cfg, models[0].config(), out)?;
    let mut rows = Vec::new();
    for m in &models {
        rows.extend(profile_model(m, &seqs, recent, out)?);
    }
    let path = out.join("profile_summary.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsRow {
    pub long_term: bool,
    pub seq_len: usize,
    pub matmul: f64,
    pub retrieval: f64,
    pub total: f64,
}

pub fn cmd_flops(model: &ModelConfig, seq_len: usize) -> Vec<FlopsRow> {
    let variants: &[bool] = match model.kind {
        ModelKind::Mosaic => &[true, false],
        ModelKind::Rotary => &[true],
    };
    variants
        .iter()
        .map(|&lt| {
            let f = estimate_flops(model, seq_len, lt);
            FlopsRow {
                long_term: lt,
                seq_len: f.seq_len,
                matmul: f.matmul,
                retrieval: f.retrieval,
                total: f.total,
            }
        })
        .collect()
}

pub fn flops_table(rows: &[FlopsRow]) -> String {
    let mut s = format!("{:<10} {:>8} {:>14} {:>14} {:>14}\n", "long_term", "seq_len", "matmul", "retrieval", "total");
    for r in rows {
        s += &format!(
            "{:<10} {:>8} {:>14.0} {:>14.0} {:>14.0}\n",
            r.long_term, r.seq_len, r.matmul, r.retrieval, r.total
        );
    }
    s
}
