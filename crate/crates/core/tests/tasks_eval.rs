use std::collections::HashMap;

use mosaics_core::architecture::{Combine, Memory, ModelConfig, ModelKind, Scope};
use mosaics_core::tasks_eval::vocab::{
    ANONYMOUS_LABELS, CONTEXT_ENTITIES, ICL_PREAMBLE, ICL_TOKENS, INTENT, NEWLINE, QUERY, SEMANTIC_LABELS, SPACE, VALUES, VOCAB_SIZE,
    WORDS,
};
use mosaics_core::tasks_eval::*;
use mosaics_core::Model;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        vocab_size: VOCAB_SIZE,
        h: 8,
        m_train_range: [2, 6],
        m_eval: 4,
        max_seq_len: 64,
        ffn_hidden: 16,
        combine: Combine::Concat,
        bandwidth_scope: Scope::Head,
        gamma_scope: Scope::Head,
        rope_base: 10_000.0,
        init_std: 0.3,
        decay_gate_init_std: 0.3,
        gamma_init: 0.5,
    }
}

/// All logits equal: every candidate scores the same.
fn uniform_logit_model() -> Model {
    let mut model = Model::init(config(ModelKind::Mosaic), 0).unwrap();
    let id = model.params().find("unembed").unwrap();
    model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    model
}

fn name(t: usize) -> String {
    let named = [(QUERY, "QUERY"), (INTENT, "INTENT"), (SPACE, "SPACE"), (NEWLINE, "NEWLINE")];
    if let Some((_, n)) = named.iter().find(|(id, _)| *id == t) {
        return n.to_string();
    }
    for (range, p) in [(WORDS, "W"), (ICL_TOKENS, "I"), (ANONYMOUS_LABELS, "A"), (SEMANTIC_LABELS, "S")] {
        if range.contains(&t) {
            return format!("{p}{}", t - range.start);
        }
    }
    format!("#{t}")
}

fn golden_task() -> IclTask {
    let i = |k: usize| ICL_TOKENS.start + k;
    IclTask {
        n_classes: 2,
        classes: vec![0, 1],
        semantic_labels: vec![vec![SEMANTIC_LABELS.start], vec![SEMANTIC_LABELS.start + 1]],
        anonymous_labels: vec![vec![ANONYMOUS_LABELS.start + 3], vec![ANONYMOUS_LABELS.start + 1]],
        label_mode: LabelMode::Anonymous,
        shots: vec![
            vec![vec![i(0), i(1), i(2)], vec![i(4), i(5), i(6)]],
            vec![vec![i(1), i(2), i(3)], vec![i(5), i(6), i(7)]],
        ],
        query: vec![i(0), i(2), i(3)],
        answer: 0,
        seed: 17,
    }
}

#[test]
fn prompt_matches_golden_serialization() {
    let golden = include_str!("data/icl_golden_2c2s.txt");
    let want: Vec<&str> = golden
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .collect();
    let spec = PromptSpec {
        delimiter: Delimiter::Space,
        shuffle_within_shot: false,
        label_mode: LabelMode::Anonymous,
    };
    let got: Vec<String> = build_prompt(&golden_task(), &spec).unwrap().into_iter().map(name).collect();
    assert_eq!(got, want);
}

/// Index of the candidate label whose demonstration input overlaps the query most.
fn nearest_x_oracle(prompt: &[usize], candidates: &[Vec<usize>]) -> usize {
    let pre = ICL_PREAMBLE.len();
    let d = prompt[pre];
    let body = &prompt[pre + 1..prompt.len() - (X_LEN + 3)];
    let query = &prompt[prompt.len() - (X_LEN + 2)..prompt.len() - 2];
    let mut best: Option<(usize, usize)> = None;
    for b in body.chunks(X_LEN + 5) {
        assert_eq!((b[0], b[X_LEN + 1], b[X_LEN + 2], b[X_LEN + 4]), (QUERY, d, INTENT, d));
        let overlap = b[1..=X_LEN].iter().filter(|t| query.contains(t)).count();
        if best.is_none_or(|(o, _)| overlap > o) {
            let label = vec![b[X_LEN + 3]];
            best = Some((overlap, candidates.iter().position(|c| *c == label).unwrap()));
        }
    }
    best.unwrap().1
}

/// Picks the candidate with the smallest token id, whatever the prompt.
fn fixed_prior(_: &[usize], candidates: &[Vec<usize>]) -> usize {
    (0..candidates.len()).min_by_key(|&i| candidates[i][0]).unwrap()
}

fn noiseless(task: &mut IclTask) {
    let template = |c: usize| (0..X_LEN).map(|k| ICL_TOKENS.start + 4 * c + k).collect::<Vec<_>>();
    for shot in task.shots.iter_mut() {
        for (slot, x) in shot.iter_mut().enumerate() {
            *x = template(task.classes[slot]);
        }
    }
    task.query = template(task.classes[task.answer]);
}

#[test]
fn nearest_x_oracle_is_exact_on_noiseless_templates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in PromptSpec::variants(LabelMode::Anonymous) {
        for shots in [1, 3] {
            for _ in 0..50 {
                let mut task = gen_icl_classification(&mut rng, 4, shots, LabelMode::Anonymous).unwrap();
                noiseless(&mut task);
                let prompt = build_prompt(&task, &spec).unwrap();
                assert_eq!(nearest_x_oracle(&prompt, &task.anonymous_labels), task.answer);
            }
        }
    }
}

/// Fraction of tasks whose predicted class slot survives a re-randomized
/// label assignment.
fn permutation_agreement(predict: impl Fn(&[usize], &[Vec<usize>]) -> usize, seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = PromptSpec::variants(LabelMode::Anonymous)[0];
    let mut same = 0;
    for _ in 0..n {
        let task = gen_icl_classification(&mut rng, 4, 2, LabelMode::Anonymous).unwrap();
        let a = predict(&build_prompt(&task, &spec).unwrap(), &task.anonymous_labels);
        let mut permuted = task.clone();
        use rand::seq::SliceRandom;
        permuted.anonymous_labels.shuffle(&mut rng);
        let b = predict(&build_prompt(&permuted, &spec).unwrap(), &permuted.anonymous_labels);
        same += usize::from(a == b);
    }
    same as f64 / n as f64
}

#[test]
fn permutation_harness_separates_symmetric_from_biased_predictors() {
    assert_eq!(permutation_agreement(nearest_x_oracle, 2, 300), 1.0);
    assert!(permutation_agreement(fixed_prior, 2, 300) < 0.5);
}

#[test]
fn fixed_label_prior_is_at_chance_over_all_mappings() {
    // every ordered draw of 4 of the anonymous symbols is equally likely
    let n = 4;
    let k = ANONYMOUS_LABELS.len();
    let (mut hit, mut total) = (0usize, 0usize);
    for a in 0..k {
        for b in (0..k).filter(|&b| b != a) {
            for c in (0..k).filter(|&c| c != a && c != b) {
                for d in (0..k).filter(|&d| d != a && d != b && d != c) {
                    let labels = [a, b, c, d].map(|x| vec![x]);
                    for answer in 0..n {
                        hit += usize::from(fixed_prior(&[], &labels) == answer);
                        total += 1;
                    }
                }
            }
        }
    }
    assert_eq!(hit * n, total);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 20_000;
    let hits = (0..trials)
        .filter(|_| {
            let t = gen_icl_classification(&mut rng, n, 1, LabelMode::Anonymous).unwrap();
            fixed_prior(&[], &t.anonymous_labels) == t.answer
        })
        .count();
    let p = 1.0 / n as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    assert!((hits as f64 / trials as f64 - p).abs() < 4.0 * sigma);
}

fn within_binomial(acc: f64, p: f64, n: usize) -> bool {
    (acc - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn uniform_logit_model_scores_chance_on_icl() {
    let model = uniform_logit_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 1500;
    let tasks: Vec<IclTask> = (0..n)
        .map(|_| gen_icl_classification(&mut rng, 4, 1, LabelMode::Anonymous).unwrap())
        .collect();
    let specs = PromptSpec::variants(LabelMode::Anonymous);
    let report = eval_icl(&model, "uniform", "icl", &[(1, tasks)], &specs).unwrap();
    assert_eq!(report.rows.len(), specs.len());
    for r in &report.rows {
        assert_eq!(r.n_eval, n);
        assert!(within_binomial(r.accuracy, 0.25, n), "{r:?}");
    }
}

#[test]
fn zero_shot_anonymous_is_chance_for_any_model() {
    let model = Model::init(config(ModelKind::Mosaic), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1500;
    let tasks: Vec<IclTask> = (0..n)
        .map(|_| gen_icl_classification(&mut rng, 4, 0, LabelMode::Anonymous).unwrap())
        .collect();
    let specs = [PromptSpec::variants(LabelMode::Anonymous)[0]];
    let report = eval_icl(&model, "random", "icl", &[(0, tasks)], &specs).unwrap();
    assert!(within_binomial(report.rows[0].accuracy, 0.25, n), "{:?}", report.rows[0]);
}

#[test]
fn qa_chance_is_one_over_value_alphabet() {
    let model = uniform_logit_model();
    let probes = qa_probes_at_length(6, 60, 8, 1600, Placement::Uniform).unwrap();
    assert!(probes.iter().all(|p| p.candidates.len() == VALUES.len()));
    let correct = eval_probes(&model, &probes).unwrap();
    let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    assert!(within_binomial(acc, 1.0 / VALUES.len() as f64, correct.len()));
}

/// Reads the answer off the prompt by matching `relation entity` anywhere.
fn oracle_retriever(probe: &Probe) -> usize {
    let p = &probe.prompt;
    let (r, e) = (p[p.len() - 2], p[p.len() - 1]);
    let body = &p[..p.len() - QUESTION_LEN];
    let v = body.windows(3).find(|w| w[0] == r && w[1] == e).unwrap()[2];
    probe.candidates.iter().position(|c| c[0] == v).unwrap()
}

#[test]
fn oracle_retriever_is_position_blind() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for placement in [Placement::FirstDoc, Placement::LastDoc, Placement::Uniform] {
        for _ in 0..100 {
            let t = gen_multidoc_qa_placed(&mut rng, 10, 8, 200, placement).unwrap();
            let probe = t.probe();
            assert_eq!(oracle_retriever(&probe), probe.answer);
        }
    }
}

#[test]
fn single_document_is_plain_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let t = gen_multidoc_qa(&mut rng, 1, 8, 64).unwrap();
        assert_eq!((t.documents.len(), t.answer_doc), (1, 0));
        assert_eq!(oracle_retriever(&t.probe()), t.probe().answer);
    }
}

#[test]
fn entities_are_unique_while_the_pool_lasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n_docs in [5, 30, 64] {
        let t = gen_multidoc_qa(&mut rng, n_docs, 8, 2000).unwrap();
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for d in &t.documents {
            for &tok in d.iter().filter(|t| CONTEXT_ENTITIES.contains(t)) {
                *seen.entry(tok).or_default() += 1;
            }
        }
        assert_eq!(seen.values().sum::<usize>(), 2 * n_docs);
        assert!(seen.values().all(|&c| c == 1), "{n_docs} docs reuse an entity");
    }
}

#[test]
fn question_always_follows_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t = gen_multidoc_qa(&mut rng, 6, 8, 100).unwrap();
    let p = t.prompt();
    assert_eq!(&p[p.len() - QUESTION_LEN..], t.question.as_slice());
    assert!(!p[..p.len() - QUESTION_LEN].contains(&vocab::QUESTION));
}

#[test]
fn generators_are_deterministic_and_roundtrip_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let icl: Vec<IclTask> = (0..20)
            .map(|i| gen_icl_classification(&mut rng, 1 + i % 4, i % 3, LabelMode::Semantic).unwrap())
            .collect();
        let qa: Vec<MultiDocQaTask> = (0..20).map(|_| gen_multidoc_qa(&mut rng, 4, 8, 64).unwrap()).collect();
        let ind: Vec<InductionTask> = (0..20).map(|_| gen_induction_task(&mut rng, 40, 32).unwrap()).collect();
        (icl, qa, ind)
    };
    let a = gen(11);
    assert_eq!(a, gen(11));
    assert_ne!(a.1, gen(12).1);

    let path = dir.path().join("icl.jsonl");
    write_jsonl(&path, &a.0).unwrap();
    assert_eq!(read_jsonl::<IclTask>(&path).unwrap(), a.0);
    let path = dir.path().join("qa.jsonl");
    write_jsonl(&path, &a.1).unwrap();
    assert_eq!(read_jsonl::<MultiDocQaTask>(&path).unwrap(), a.1);
    let path = dir.path().join("induction.jsonl");
    write_jsonl(&path, &a.2).unwrap();
    assert_eq!(read_jsonl::<InductionTask>(&path).unwrap(), a.2);
}

#[test]
fn extrapolation_at_training_length_is_the_plain_path() {
    let model = Model::init(config(ModelKind::Mosaic), 13).unwrap();
    let l = model.config().max_seq_len;
    let report = eval_extrapolation(&model, "m", &[l], 21, 8, 40).unwrap();
    let probes = qa_probes_at_length(21, l, 8, 40, Placement::Uniform).unwrap();
    let plain = eval_qa(&model, "m", "qa", &probes).unwrap();
    assert_eq!(report.rows[0].accuracy.to_bits(), plain.rows[0].accuracy.to_bits());
    assert_eq!(report.rows[0].n_eval, plain.rows[0].n_eval);
}

#[test]
fn profile_is_a_delta_when_one_pair_is_visible() {
    let model = Model::init(config(ModelKind::Mosaic), 14).unwrap();
    let m = model.config().m_eval;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seqs: Vec<Vec<usize>> = (0..5)
        .map(|_| (0..=m).map(|_| rng.random_range(3..VOCAB_SIZE)).collect())
        .collect();
    let p = attention_profile(&model, &seqs, &ProfileSelection::default()).unwrap();
    assert!((p.rows[0].mean - 1.0).abs() < 1e-12);
    assert!(p.rows[1..].iter().all(|r| r.mean == 0.0));
}

#[test]
fn zero_bandwidth_gives_uniform_profile() {
    let mut model = Model::init(config(ModelKind::Mosaic), 15).unwrap();
    for i in 0..model.params().len() {
        let n = model.params().param(i).name.clone();
        if n.ends_with("theta0") || n.ends_with("theta1") {
            model.params_mut().value_mut(i).data_mut()[0] = -80.0;
        }
    }
    let (len, m) = (40, model.config().m_eval);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let seqs: Vec<Vec<usize>> = (0..4)
        .map(|_| (0..len).map(|_| rng.random_range(3..VOCAB_SIZE)).collect())
        .collect();
    for memory in [Memory::Long, Memory::Short] {
        let sel = ProfileSelection { layers: None, memory };
        let means = attention_profile(&model, &seqs, &sel).unwrap().means();
        let visible: Vec<f64> = means.iter().copied().filter(|&w| w > 0.0).collect();
        let expect = 1.0 / visible.len() as f64;
        assert!(visible.iter().all(|w| (w - expect).abs() < 1e-9));
        if memory == Memory::Long {
            assert_eq!(visible.len(), len - m);
        }
    }
}

#[test]
fn profile_csv_has_one_row_per_position() {
    let model = Model::init(config(ModelKind::Rotary), 16).unwrap();
    let seqs = vec![vec![5, 6, 7, 8, 9, 10]; 3];
    let p = attention_profile(&model, &seqs, &ProfileSelection::default()).unwrap();
    assert!((p.means().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.csv");
    p.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "position,mean,std");
    assert_eq!(text.lines().count(), 7);
}

fn arb_rows() -> impl Strategy<Value = Vec<EvalRow>> {
    proptest::collection::vec((0usize..3, 0usize..4, 0.0f64..=1.0), 1..24).prop_map(|xs| {
        xs.into_iter()
            .map(|(shots, v, acc)| EvalRow {
                task: "icl".into(),
                model: "m".into(),
                length: 0,
                shots,
                variant: format!("v{v}"),
                accuracy: acc,
                n_eval: 10,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn adding_variants_never_lowers_best_score(rows in arb_rows(), extra in arb_rows()) {
        let base = EvalReport { rows: rows.clone(), details: vec![] }.best_of_variants();
        let mut all = rows;
        all.extend(extra);
        let more = EvalReport { rows: all, details: vec![] }.best_of_variants();
        for b in &base {
            let m = more.iter().find(|r| r.shots == b.shots).unwrap();
            prop_assert!(m.accuracy >= b.accuracy);
        }
    }
}
