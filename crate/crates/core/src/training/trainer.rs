//! The training loop: batches, gradients, updates, metrics and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, TrainConfig};
use super::data::{DocumentSource, Packer, Row};
use super::optim::{adamw_step, clip_grad_norm, OptimizerState};
use crate::architecture::{load_model, write_dir_atomic, write_model_files, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor, DType};
use crate::numerics::{Graph, Tensor};
use crate::Model;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const STATE_FILE: &str = "train_state.json";
const OPTIMIZER_DIR: &str = "optimizer";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Long-term delay: uniform on `m_train_range` while training, `m_eval` otherwise.
pub fn sample_m(rng: &mut impl Rng, c: &ModelConfig, phase: Phase) -> usize {
    match (c.kind, phase) {
        (ModelKind::Rotary, _) => 1,
        (_, Phase::Eval) => c.m_eval,
        (_, Phase::Train) => rng.random_range(c.m_train_range[0]..=c.m_train_range[1]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub m: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRow>,
    pub final_step: usize,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    seed: u64,
}

/// Summed next-token loss of a batch, divided by its number of targets, with
/// gradients for every parameter (rows are processed in order).
pub fn batch_gradients(model: &Model, rows: &[Row], m: usize) -> Result<(f64, Vec<Tensor>)> {
    let normalizer = rows.iter().map(Row::n_targets).sum::<usize>().max(1) as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for row in rows {
        let mut g = Graph::new();
        let vars = model.params().bind(&mut g, true);
        let out = model.forward(&mut g, &vars, &row.tokens, &row.doc_ids, m)?;
        let loss = g.cross_entropy(out.logits, &row.targets, normalizer)?;
        total += g.value(loss).item();
        let mut gr = g.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(&vars) {
            if let Some(d) = gr.take(v) {
                acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((total, grads))
}

/// Summed cross-entropy per document id of one row.
pub fn document_losses(model: &Model, row: &Row, m: usize) -> Result<Vec<(usize, f64)>> {
    let logits = model.logits(&row.tokens, &row.doc_ids, m)?;
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (t, target) in row.targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let r = logits.row(t);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = r.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        let id = row.doc_ids[t];
        match out.last_mut() {
            Some((d, s)) if *d == id => *s += lse - r[target],
            _ => out.push((id, lse - r[target])),
        }
    }
    Ok(out)
}

fn next_batch(packer: &mut Packer, source: &mut dyn DocumentSource, n: usize) -> Result<Vec<Row>> {
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        match packer.next_row(source)? {
            Some(r) => rows.push(r),
            None => break,
        }
    }
    Ok(rows)
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}")
}

/// Latest complete checkpoint under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<(usize, PathBuf)> {
    let dir = out.join(CHECKPOINT_DIR);
    let entries = fs::read_dir(&dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter_map(|p| {
            let text = fs::read_to_string(p.join(STATE_FILE)).ok()?;
            let state: TrainState = serde_json::from_str(&text).ok()?;
            Some((state.step, p))
        })
        .max_by_key(|(s, _)| *s)
}

fn save_checkpoint(out: &Path, model: &Model, opt: &OptimizerState, step: usize, c: &TrainConfig) -> Result<PathBuf> {
    let dir = out.join(CHECKPOINT_DIR).join(checkpoint_name(step));
    write_dir_atomic(&dir, |tmp| {
        write_model_files(tmp, model, serde_json::json!({ "step": step, "seed": c.seed }))?;
        let od = tmp.join(OPTIMIZER_DIR);
        fs::create_dir_all(&od).map_err(|e| Error::io(&od, e))?;
        for (i, p) in model.params().iter().enumerate() {
            write_tensor(&od, &format!("m.{}", p.name), &opt.m[i], DType::F64)?;
            write_tensor(&od, &format!("v.{}", p.name), &opt.v[i], DType::F64)?;
        }
        let state = TrainState { step, seed: c.seed };
        let path = tmp.join(STATE_FILE);
        let text = serde_json::to_string(&state).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    })?;
    Ok(dir)
}

fn load_optimizer(dir: &Path, model: &Model, step: usize) -> Result<OptimizerState> {
    let od = dir.join(OPTIMIZER_DIR);
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in model.params().iter() {
        m.push(read_tensor(&od, &format!("m.{}", p.name))?);
        v.push(read_tensor(&od, &format!("v.{}", p.name))?);
    }
    Ok(OptimizerState { m, v, step: step as u64 })
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
        .collect()
}

fn append_metric(path: &Path, row: &MetricRow) -> Result<()> {
    let exists = path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(row).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn dump_divergence(out: Option<&Path>, model: &Model, step: usize, loss: f64, grads: &[Tensor]) -> Error {
    let detail = format!("loss {loss} at step {step}");
    if let Some(out) = out {
        let params: Vec<serde_json::Value> = model
            .params()
            .iter()
            .zip(grads)
            .map(|(p, g)| {
                serde_json::json!({
                    "name": p.name,
                    "param_norm": p.value.sq_norm().sqrt(),
                    "grad_norm": g.sq_norm().sqrt(),
                    "finite": p.value.is_finite() && g.is_finite(),
                })
            })
            .collect();
        let dump = serde_json::json!({ "step": step, "loss": loss, "params": params });
        let _ = fs::write(out.join("divergence.json"), serde_json::to_string_pretty(&dump).unwrap_or_default());
    }
    Error::Diverged { step, detail }
}

/// Output location of a training run.
#[derive(Clone, Debug)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    /// Continue from the latest checkpoint under `dir`.
    pub resume: bool,
}

/// Trains `model` on rows packed from `source`.
///
/// Steps are numbered from 1; step `s` uses `lr_at(s)` and one delay `m`
/// shared by its batch. With `out`, metrics are appended to `metrics.csv`
/// and checkpoints written under `checkpoints/`. Resuming expects `source`
/// to be freshly constructed: the consumed part of the stream is replayed.
pub fn train_loop(
    model: &mut Model,
    source: &mut dyn DocumentSource,
    c: &TrainConfig,
    out: Option<RunOutput<'_>>,
) -> Result<TrainOutcome> {
    c.validate()?;
    let mut packer = Packer::new(c.seq_len);
    let mut m_rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut opt = OptimizerState::new(model.params());
    let mut start = 0;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let out_dir = out.as_ref().map(|o| o.dir);
    if let Some(o) = &out {
        fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
        let metrics_path = o.dir.join(METRICS_FILE);
        if o.resume {
            if let Some((step, dir)) = latest_checkpoint(o.dir) {
                *model = load_model(&dir)?;
                opt = load_optimizer(&dir, model, step)?;
                for _ in 0..step {
                    next_batch(&mut packer, source, c.batch_size)?;
                    sample_m(&mut m_rng, model.config(), Phase::Train);
                }
                start = step;
                log::info!("resuming from {} at step {step}", dir.display());
            }
            if metrics_path.exists() {
                metrics = read_metrics(&metrics_path)?;
                metrics.retain(|r| r.step <= start);
            }
            write_metrics(&metrics_path, &metrics)?;
        } else if metrics_path.exists() {
            fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        }
    }
    let timer = Instant::now();
    let mut step = start;
    while step < c.total_steps {
        let rows = next_batch(&mut packer, source, c.batch_size)?;
        if rows.is_empty() {
            log::warn!("data exhausted after {step} steps");
            break;
        }
        step += 1;
        let m = sample_m(&mut m_rng, model.config(), Phase::Train);
        let lr = lr_at(step, c);
        let (loss, mut grads) = batch_gradients(model, &rows, m)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(dump_divergence(out_dir, model, step, loss, &grads));
        }
        let grad_norm = clip_grad_norm(&mut grads, c.clip_norm);
        adamw_step(model.params_mut(), &grads, &mut opt, lr, c)?;
        let row = MetricRow {
            step,
            lr,
            m,
            loss,
            grad_norm,
            wall_ms: timer.elapsed().as_millis() as u64,
        };
        if let Some(dir) = out_dir {
            append_metric(&dir.join(METRICS_FILE), &row)?;
            let due = c.checkpoint_every > 0 && step % c.checkpoint_every == 0;
            if due || step == c.total_steps {
                checkpoints.push(save_checkpoint(dir, model, &opt, step, c)?);
            }
        }
        if step % 50 == 0 || step == 1 {
            log::info!("step {step} lr {lr:.2e} m {m} loss {loss:.4} |g| {grad_norm:.3}");
        }
        metrics.push(row);
    }
    Ok(TrainOutcome {
        metrics,
        final_step: step,
        checkpoints,
    })
}
