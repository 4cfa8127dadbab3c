//! n-shot classification prompts with semantic or anonymous labels.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{
    sample_distinct, signature, ANONYMOUS_LABELS, ICL_CLASSES, ICL_PREAMBLE, ICL_TOKENS, INTENT, NEWLINE, QUERY,
    SEMANTIC_LABELS, SPACE,
};
use crate::error::{Error, Result};

/// Tokens per input `x`.
pub const X_LEN: usize = 3;
/// Probability that a token of `x` is replaced by a random template token.
pub const X_NOISE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Space,
    Newline,
}

impl Delimiter {
    pub fn token(self) -> usize {
        match self {
            Delimiter::Space => SPACE,
            Delimiter::Newline => NEWLINE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Semantic,
    Anonymous,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(LabelMode::Semantic),
            "anonymous" => Ok(LabelMode::Anonymous),
            _ => Err(Error::Config(format!("unknown label mode {s:?} (semantic, anonymous)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub delimiter: Delimiter,
    pub shuffle_within_shot: bool,
    pub label_mode: LabelMode,
}

impl PromptSpec {
    /// The four delimiter × shuffle variants.
    pub fn variants(label_mode: LabelMode) -> [PromptSpec; 4] {
        let v = |delimiter, shuffle_within_shot| PromptSpec {
            delimiter,
            shuffle_within_shot,
            label_mode,
        };
        [
            v(Delimiter::Space, false),
            v(Delimiter::Space, true),
            v(Delimiter::Newline, false),
            v(Delimiter::Newline, true),
        ]
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.delimiter {
            Delimiter::Space => "space",
            Delimiter::Newline => "newline",
        };
        let s = if self.shuffle_within_shot { "shuffled" } else { "ordered" };
        write!(f, "{d}/{s}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclTask {
    pub n_classes: usize,
    /// Template id of each class slot.
    pub classes: Vec<usize>,
    pub semantic_labels: Vec<Vec<usize>>,
    /// Re-randomized per task.
    pub anonymous_labels: Vec<Vec<usize>>,
    pub label_mode: LabelMode,
    /// `shots[s][c]` is the input of class slot `c` in shot `s`.
    pub shots: Vec<Vec<Vec<usize>>>,
    pub query: Vec<usize>,
    /// Class slot of the query.
    pub answer: usize,
    /// Drives within-shot shuffling.
    pub seed: u64,
}

impl IclTask {
    pub fn labels(&self, mode: LabelMode) -> &[Vec<usize>] {
        match mode {
            LabelMode::Semantic => &self.semantic_labels,
            LabelMode::Anonymous => &self.anonymous_labels,
        }
    }
}

/// Noisy sample of template `class`.
pub fn sample_x(rng: &mut impl Rng, class: usize) -> Vec<usize> {
    (0..X_LEN)
        .map(|_| {
            if rng.random_bool(X_NOISE) {
                rng.random_range(ICL_TOKENS)
            } else {
                rng.random_range(signature(class))
            }
        })
        .collect()
}

pub fn gen_icl_classification(
    rng: &mut impl Rng,
    n_classes: usize,
    n_shots: usize,
    label_mode: LabelMode,
) -> Result<IclTask> {
    let cap = ICL_CLASSES.min(ANONYMOUS_LABELS.len());
    if n_classes == 0 || n_classes > cap {
        return Err(Error::Config(format!("n_classes {n_classes} outside 1..={cap}")));
    }
    let classes = sample_distinct(rng, 0..ICL_CLASSES, n_classes);
    let semantic_labels = classes.iter().map(|&c| vec![SEMANTIC_LABELS.start + c]).collect();
    let anonymous_labels = sample_distinct(rng, ANONYMOUS_LABELS, n_classes)
        .into_iter()
        .map(|t| vec![t])
        .collect();
    let shots = (0..n_shots)
        .map(|_| classes.iter().map(|&c| sample_x(rng, c)).collect())
        .collect();
    let answer = rng.random_range(0..n_classes);
    let query = sample_x(rng, classes[answer]);
    Ok(IclTask {
        n_classes,
        classes,
        semantic_labels,
        anonymous_labels,
        label_mode,
        shots,
        query,
        answer,
        seed: rng.random(),
    })
}

/// Preamble, one `QUERY x ␣ INTENT y ␣` block per example, then
/// `QUERY x_test ␣ INTENT`; `␣` is the prompt's delimiter.
pub fn build_prompt(task: &IclTask, spec: &PromptSpec) -> Result<Vec<usize>> {
    let labels = task.labels(spec.label_mode);
    if labels.len() != task.n_classes || labels.iter().any(|l| l.is_empty()) {
        return Err(Error::Input("every class needs a non-empty label".into()));
    }
    let d = spec.delimiter.token();
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut out = ICL_PREAMBLE.to_vec();
    out.push(d);
    let mut order: Vec<usize> = (0..task.n_classes).collect();
    for shot in &task.shots {
        if spec.shuffle_within_shot {
            order.shuffle(&mut rng);
        }
        for &c in &order {
            out.push(QUERY);
            out.extend(&shot[c]);
            out.push(d);
            out.push(INTENT);
            out.extend(&labels[c]);
            out.push(d);
        }
    }
    out.push(QUERY);
    out.extend(&task.query);
    out.push(d);
    out.push(INTENT);
    Ok(out)
}
