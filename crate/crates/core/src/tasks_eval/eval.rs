//! Scoring harness and evaluation suites.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::icl::{build_prompt, IclTask, PromptSpec};
use super::induction::InductionTask;
use super::qa::{docs_for_length, gen_multidoc_qa_placed, Placement, Probe};
use crate::architecture::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::BOS;

/// One aggregated accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub model: String,
    pub length: usize,
    pub shots: usize,
    pub variant: String,
    pub accuracy: f64,
    pub n_eval: usize,
}

/// Per-instance outcome, kept so other selection rules can be recomputed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalDetail {
    pub task: String,
    pub model: String,
    pub shots: usize,
    pub instance: usize,
    pub variant: String,
    pub correct: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub details: Vec<EvalDetail>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.details.extend(other.details);
    }

    pub fn find(&self, task: &str, model: &str) -> Vec<&EvalRow> {
        self.rows.iter().filter(|r| r.task == task && r.model == model).collect()
    }

    /// Best accuracy over prompt variants for each `(task, model, length, shots)`.
    pub fn best_of_variants(&self) -> Vec<EvalRow> {
        let mut best: BTreeMap<(String, String, usize, usize), EvalRow> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.task.clone(), r.model.clone(), r.length, r.shots);
            match best.get(&key) {
                Some(b) if b.accuracy >= r.accuracy => {}
                _ => {
                    best.insert(key, r.clone());
                }
            }
        }
        best.into_values().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn write_details_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.details)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EvalRow>, _>>()
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Ok(Self {
            rows,
            details: Vec::new(),
        })
    }

    /// Fixed-width table of all rows.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:<10} {:>7} {:>5} {:<18} {:>8} {:>6}\n",
            "task", "model", "length", "shots", "variant", "accuracy", "n"
        );
        for r in &self.rows {
            s += &format!(
                "{:<14} {:<10} {:>7} {:>5} {:<18} {:>8.4} {:>6}\n",
                r.task, r.model, r.length, r.shots, r.variant, r.accuracy, r.n_eval
            );
        }
        s
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn log_softmax_row(logits: &Tensor, t: usize) -> Vec<f64> {
    let row = logits.row(t);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Total log-likelihood of each candidate continuation of `prompt`.
pub fn score_candidates(model: &Model, prompt: &[usize], candidates: &[Vec<usize>]) -> Result<Vec<f64>> {
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(Error::Input("candidate label has no tokens".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let base = model.eval_logits(prompt)?;
    let last = log_softmax_row(&base, prompt.len() - 1);
    candidates
        .iter()
        .map(|c| {
            if c.len() == 1 {
                return Ok(last[c[0]]);
            }
            let mut seq = prompt.to_vec();
            seq.extend(&c[..c.len() - 1]);
            let logits = model.eval_logits(&seq)?;
            Ok((0..c.len())
                .map(|i| log_softmax_row(&logits, prompt.len() - 1 + i)[c[i]])
                .sum())
        })
        .collect()
}

/// Index of the best-scoring candidate; ties go to the lowest index.
pub fn predict(model: &Model, probe: &Probe) -> Result<usize> {
    let scores = score_candidates(model, &probe.prompt, &probe.candidates)?;
    Ok(argmax(&scores))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Correctness of each probe.
pub fn eval_probes(model: &Model, probes: &[Probe]) -> Result<Vec<bool>> {
    probes.iter().map(|p| Ok(predict(model, p)? == p.answer)).collect()
}

fn accuracy(correct: &[bool]) -> f64 {
    if correct.is_empty() {
        return 0.0;
    }
    correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}

fn row(task: &str, model: &str, length: usize, shots: usize, variant: &str, correct: &[bool]) -> EvalRow {
    EvalRow {
        task: task.into(),
        model: model.into(),
        length,
        shots,
        variant: variant.into(),
        accuracy: accuracy(correct),
        n_eval: correct.len(),
    }
}

/// Scores `groups` of same-shot tasks under every prompt variant; one row
/// per (group, variant).
pub fn eval_icl(
    model: &Model,
    tag: &str,
    dataset: &str,
    groups: &[(usize, Vec<IclTask>)],
    specs: &[PromptSpec],
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (shots, tasks) in groups {
        for spec in specs {
            let variant = spec.to_string();
            let mut correct = Vec::with_capacity(tasks.len());
            let mut max_len = 0;
            for (i, task) in tasks.iter().enumerate() {
                let prompt = build_prompt(task, spec)?;
                max_len = max_len.max(prompt.len());
                let probe = Probe {
                    prompt,
                    candidates: task.labels(spec.label_mode).to_vec(),
                    answer: task.answer,
                };
                let ok = predict(model, &probe)? == probe.answer;
                correct.push(ok);
                report.details.push(EvalDetail {
                    task: dataset.into(),
                    model: tag.into(),
                    shots: *shots,
                    instance: i,
                    variant: variant.clone(),
                    correct: ok,
                });
            }
            report.rows.push(row(dataset, tag, max_len, *shots, &variant, &correct));
        }
    }
    Ok(report)
}

/// Accuracy over probes grouped by prompt length.
pub fn eval_qa(model: &Model, tag: &str, task: &str, probes: &[Probe]) -> Result<EvalReport> {
    let mut by_len: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for (p, ok) in probes.iter().zip(eval_probes(model, probes)?) {
        by_len.entry(p.prompt.len()).or_default().push(ok);
    }
    let rows = by_len
        .iter()
        .map(|(&len, c)| row(task, tag, len, 0, "-", c))
        .collect();
    Ok(EvalReport {
        rows,
        details: Vec::new(),
    })
}

/// Multi-document QA probes filling `length` tokens, seeded per length.
pub fn qa_probes_at_length(seed: u64, length: usize, doc_len: usize, n: usize, placement: Placement) -> Result<Vec<Probe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (length as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n_docs = docs_for_length(length, doc_len);
    (0..n)
        .map(|_| Ok(gen_multidoc_qa_placed(&mut rng, n_docs, doc_len, length, placement)?.probe()))
        .collect()
}

/// Runs QA at each length with unchanged weights; one row per length,
/// labelled with the requested length.
pub fn eval_extrapolation(
    model: &Model,
    tag: &str,
    lengths: &[usize],
    seed: u64,
    doc_len: usize,
    n: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for &len in lengths {
        let probes = qa_probes_at_length(seed, len, doc_len, n, Placement::Uniform)?;
        let correct = eval_probes(model, &probes)?;
        report.rows.push(row("qa_extrapolate", tag, len, 0, "-", &correct));
    }
    Ok(report)
}

pub fn eval_persistent_knowledge(model: &Model, tag: &str, probes: &[Probe]) -> Result<EvalReport> {
    let correct = eval_probes(model, probes)?;
    let len = probes.iter().map(|p| p.prompt.len()).max().unwrap_or(0);
    Ok(EvalReport {
        rows: vec![row("persistent", tag, len, 0, "-", &correct)],
        details: Vec::new(),
    })
}

/// Greedy next-token accuracy at the evaluated positions; sequences are
/// prefixed with BOS as in training.
pub fn eval_induction(model: &Model, tasks: &[InductionTask]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in tasks {
        let mut seq = vec![BOS];
        seq.extend(&t.tokens);
        let logits = model.eval_logits(&seq)?;
        for &(i, b) in &t.eval {
            hit += usize::from(argmax(logits.row(i + 1)) == b);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
