use std::path::PathBuf;

use mosaics_core::architecture::{
    build_masks, load_model, persistent_block, restore_long_term, save_model, strip_long_term, Combine, Memory,
    ModelConfig, ModelKind, Scope, Source,
};
use mosaics_core::numerics::check_gradient;
use mosaics_core::{Graph, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: 11,
        h: 4,
        m_train_range: [2, 4],
        m_eval: 2,
        max_seq_len: 16,
        ffn_hidden: 12,
        combine: Combine::Concat,
        bandwidth_scope: Scope::Head,
        gamma_scope: Scope::Head,
        rope_base: 10_000.0,
        init_std: 0.3,
        decay_gate_init_std: 0.3,
        gamma_init: 0.5,
    }
}

/// Model with every parameter randomized, including gates, gains and thetas.
fn random_model(config: ModelConfig, seed: u64) -> Model {
    let mut model = Model::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..model.params().len() {
        let scale = if model.params().param(i).name.contains("theta") { 0.5 } else { 0.4 };
        for x in model.params_mut().value_mut(i).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
    model
}

/// Straight-line reimplementation reading parameters by name.
mod oracle {
    use super::*;

    pub struct Oracle<'a> {
        pub model: &'a Model,
    }

    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + 1e-6).sqrt();
        x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
    }

    fn normalize(x: &[f64]) -> Vec<f64> {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        x.iter().map(|v| v / n).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    impl<'a> Oracle<'a> {
        fn p(&self, name: &str) -> &Tensor {
            let id = self.model.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
            self.model.params().get(id)
        }

        fn scalar(&self, layer_mem: &str, head: usize, field: &str) -> f64 {
            let per_head = format!("{layer_mem}.{head}.{field}");
            let id = self
                .model
                .params()
                .find(&per_head)
                .or_else(|| self.model.params().find(&format!("{layer_mem}.{field}")))
                .unwrap();
            self.model.params().get(id).item()
        }

        fn memory_head(&self, xn: &[Vec<f64>], prefix: &str, head: usize, visible: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
            let l = xn.len();
            let r = format!("{prefix}.{head}");
            let (phi, wg, wl, psi) = (
                self.p(&format!("{r}.w_phi")),
                self.p(&format!("{r}.w_g")),
                self.p(&format!("{r}.w_lambda")),
                self.p(&format!("{r}.w_psi")),
            );
            let gamma = self.scalar(prefix, head, "gamma");
            let (t0, t1, ta) = (
                self.scalar(prefix, head, "theta0"),
                self.scalar(prefix, head, "theta1"),
                self.scalar(prefix, head, "theta_alpha"),
            );
            let mut keys = Vec::with_capacity(l);
            let mut bar = vec![0.0; phi.rows()];
            for x in xn {
                let g = dot(wg.row(0), x).clamp(-30.0, 30.0).exp();
                let lam = (-dot(wl.row(0), x).abs()).exp();
                let proj = matvec(phi, x);
                bar = bar.iter().zip(&proj).map(|(b, p)| g * p + lam * b).collect();
                keys.push(normalize(&bar));
            }
            let raw: Vec<Vec<f64>> = xn.iter().map(|x| matvec(psi, x)).collect();
            let values: Vec<Vec<f64>> = (0..l)
                .map(|t| {
                    let next = if t + 1 < l { raw[t + 1].clone() } else { vec![0.0; psi.rows()] };
                    let blend: Vec<f64> = raw[t].iter().zip(&next).map(|(a, b)| gamma * a + (1.0 - gamma) * b).collect();
                    normalize(&blend)
                })
                .collect();
            (0..l)
                .map(|t| {
                    let idx: Vec<usize> = (0..l).filter(|&i| visible(t, i)).collect();
                    let mut out = vec![0.0; psi.rows()];
                    if idx.is_empty() {
                        return out;
                    }
                    let n = idx.len() as f64;
                    let alpha = (-ta.abs()).exp();
                    let beta = t1.exp() * n.powf(alpha) + t0.exp();
                    let logits: Vec<f64> = idx.iter().map(|&i| beta * dot(&keys[t], &keys[i])).collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|s| (s - max).exp()).sum();
                    for (&i, s) in idx.iter().zip(&logits) {
                        let w = (s - max).exp() / z;
                        for (o, v) in out.iter_mut().zip(&values[i]) {
                            *o += w * v;
                        }
                    }
                    out
                })
                .collect()
        }

        pub fn logits(&self, tokens: &[usize], m: usize, long_term: bool) -> Vec<Vec<f64>> {
            let c = self.model.config();
            let embed = self.p("embed");
            let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| embed.row(t).to_vec()).collect();
            let l = tokens.len();
            for layer in 0..c.n_layers {
                let pre = format!("layers.{layer}");
                let xn: Vec<Vec<f64>> = x.iter().map(|v| rms(v, self.p(&format!("{pre}.attn_norm")).data())).collect();
                let h = c.h;
                let short: Vec<Vec<Vec<f64>>> = (0..c.n_heads)
                    .map(|hd| self.memory_head(&xn, &format!("{pre}.short"), hd, |t, i| i < t && i + h > t))
                    .collect();
                let long: Vec<Vec<Vec<f64>>> = (0..c.n_heads)
                    .map(|hd| {
                        if long_term {
                            self.memory_head(&xn, &format!("{pre}.long"), hd, |t, i| i + m <= t)
                        } else {
                            vec![vec![0.0; c.d_head()]; l]
                        }
                    })
                    .collect();
                let w_out = self.p(&format!("{pre}.w_out"));
                for t in 0..l {
                    let mut cat = Vec::new();
                    match c.combine {
                        Combine::Concat => {
                            for o in short.iter().chain(&long) {
                                cat.extend_from_slice(&o[t]);
                            }
                        }
                        Combine::Sum => {
                            for (s, lo) in short.iter().zip(&long) {
                                cat.extend(s[t].iter().zip(&lo[t]).map(|(a, b)| a + b));
                            }
                        }
                    }
                    let add = matvec(w_out, &cat);
                    x[t].iter_mut().zip(add).for_each(|(a, b)| *a += b);
                }
                for xt in x.iter_mut() {
                    let xn = rms(xt, self.p(&format!("{pre}.ffn_norm")).data());
                    let a = matvec(self.p(&format!("{pre}.w1")), &xn);
                    let b = matvec(self.p(&format!("{pre}.w3")), &xn);
                    let hidden: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
                    let out = matvec(self.p(&format!("{pre}.w2")), &hidden);
                    xt.iter_mut().zip(out).for_each(|(a, b)| *a += b);
                }
            }
            x.iter()
                .map(|v| matvec(self.p("unembed"), &rms(v, self.p("final_norm").data())))
                .collect()
        }
    }
}

fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (r, c, *v)))
        .map(|(r, c, v)| (a.get2(r, c) - v).abs())
        .fold(0.0, f64::max)
}

const TOKENS: [usize; 6] = [1, 7, 3, 7, 10, 2];

#[test]
fn forward_matches_naive_loops() {
    for (combine, bw, gamma) in [
        (Combine::Concat, Scope::Head, Scope::Head),
        (Combine::Sum, Scope::Layer, Scope::Layer),
    ] {
        let mut c = config(ModelKind::Mosaic);
        c.combine = combine;
        c.bandwidth_scope = bw;
        c.gamma_scope = gamma;
        let model = random_model(c, 3);
        for m in [1, 2, 4] {
            let got = model.logits(&TOKENS, &[0; 6], m).unwrap();
            let want = oracle::Oracle { model: &model }.logits(&TOKENS, m, true);
            assert!(max_diff(&got, &want) < 1e-12, "{combine:?} m={m}: {}", max_diff(&got, &want));
        }
        let (stripped, _) = strip_long_term(&model).unwrap();
        let got = stripped.logits(&TOKENS, &[0; 6], 2).unwrap();
        let want = oracle::Oracle { model: &model }.logits(&TOKENS, 2, false);
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_logits.json")
}

#[test]
fn forward_reproduces_golden_logits() {
    let model = random_model(config(ModelKind::Mosaic), 3);
    let path = golden_path();
    if std::env::var_os("MOSAICS_WRITE_GOLDEN").is_some() {
        let want = oracle::Oracle { model: &model }.logits(&TOKENS, 2, true);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&want).unwrap()).unwrap();
    }
    let golden: Vec<Vec<f64>> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let got = model.logits(&TOKENS, &[0; 6], 2).unwrap();
    assert_eq!(got.shape(), &[6, 11]);
    assert!(max_diff(&got, &golden) < 1e-5);
}

#[test]
fn logits_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in [ModelKind::Mosaic, ModelKind::Rotary] {
        let model = random_model(config(kind), 4);
        for _ in 0..10 {
            let tokens: Vec<usize> = (0..12).map(|_| rng.random_range(0..11)).collect();
            let base = model.logits(&tokens, &[0; 12], 2).unwrap();
            let cut = rng.random_range(0..11);
            let mut changed = tokens.clone();
            for t in changed.iter_mut().skip(cut + 1) {
                *t = rng.random_range(0..11);
            }
            let other = model.logits(&changed, &[0; 12], 2).unwrap();
            for t in 0..=cut {
                assert_eq!(base.row(t), other.row(t), "{kind:?} position {t}");
            }
        }
    }
}

#[test]
fn single_token_memory_unit_is_residual() {
    let model = random_model(config(ModelKind::Mosaic), 5);
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g, false);
    let x = g.constant(Tensor::matrix(1, 8, (0..8).map(|i| i as f64 - 3.5).collect()).unwrap());
    let masks = build_masks(1, 4, 2, &[0]).unwrap();
    let out = model.memory_unit_forward(&mut g, &vars, 0, x, &masks, &mut Vec::new()).unwrap();
    assert_eq!(g.value(out), g.value(x));
}

#[test]
fn identical_stores_give_identical_retrievals() {
    let mut c = config(ModelKind::Mosaic);
    c.n_heads = 1;
    c.h = 8;
    c.m_train_range = [1, 8];
    let mut model = random_model(c, 6);
    // copy every short-term parameter of layer 0 onto its long-term twin
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in names.iter().filter(|n| n.starts_with("layers.0.short")) {
        let src = model.params().find(name).unwrap();
        let dst = model.params().find(&name.replace(".short", ".long")).unwrap();
        let v = model.params().get(src).clone();
        *model.params_mut().get_mut(dst) = v;
    }
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g, false);
    let out = model.forward(&mut g, &vars, &[1, 4, 2, 9, 4, 5], &[0; 6], 1).unwrap();
    let pick = |mem| {
        out.retrievals
            .iter()
            .find(|r| r.layer == 0 && r.source == Source::Memory(mem))
            .unwrap()
            .node
    };
    assert_eq!(g.value(pick(Memory::Short)), g.value(pick(Memory::Long)));
}

#[test]
fn persistent_block_cases() {
    let mut g = Graph::new();
    // zero gate branches leave the residual
    let x = g.constant(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.5, -0.1]).unwrap());
    let norm = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[4, 3]));
    let w2 = g.constant(Tensor::full(&[3, 4], 0.7));
    let out = persistent_block(&mut g, x, norm, zero, w2, zero).unwrap();
    assert_eq!(g.value(out), g.value(x));

    // 1-d identity weights: x̂ = 1 gives SiLU(1) = 1/(1+e⁻¹) on top of the residual
    let x = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let gain = g.constant(Tensor::vector(vec![(1.0f64 + 1e-6).sqrt()]));
    let one = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let out = persistent_block(&mut g, x, gain, one, one, one).unwrap();
    let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((silu1 - 0.7310585786300049).abs() < 1e-15);
    assert!((g.value(out).item() - (1.0 + silu1)).abs() < 1e-12);
}

#[test]
fn persistent_block_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w: Vec<f64> = (0..3 * 5 * 3 + 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x0 = Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let err = check_gradient(
        |g, p| {
            let w1 = g.slice(p, 0, 0, 15)?;
            let w1 = g.reshape(w1, &[5, 3])?;
            let w2 = g.slice(p, 0, 15, 15)?;
            let w2 = g.reshape(w2, &[3, 5])?;
            let w3 = g.slice(p, 0, 30, 15)?;
            let w3 = g.reshape(w3, &[5, 3])?;
            let gain = g.slice(p, 0, 45, 3)?;
            let x = g.constant(x0.clone());
            let y = persistent_block(g, x, gain, w1, w2, w3)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &Tensor::vector(w),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// Finite-difference check over every parameter of a small model's loss.
fn model_gradient_error(model: &Model, tokens: &[usize], doc_ids: &[usize], m: usize) -> f64 {
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.value.shape().to_vec()).collect();
    let flat: Vec<f64> = model.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
    let targets: Vec<Option<usize>> = (0..tokens.len())
        .map(|t| tokens.get(t + 1).copied())
        .collect();
    check_gradient(
        |g, p| {
            let mut vars = Vec::with_capacity(shapes.len());
            let mut offset = 0;
            for s in &shapes {
                let n: usize = s.iter().product();
                let part = g.slice(p, 0, offset, n)?;
                vars.push(g.reshape(part, s)?);
                offset += n;
            }
            let out = model.forward(g, &vars, tokens, doc_ids, m)?;
            g.cross_entropy(out.logits, &targets, tokens.len() as f64)
        },
        &Tensor::vector(flat),
        1e-5,
    )
    .unwrap()
}

fn small_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        ffn_hidden: 8,
        ..config(kind)
    }
}

#[test]
fn full_model_gradient_check() {
    let tokens = [1, 5, 9, 5, 2, 8, 5, 3];
    let docs = [0, 0, 0, 0, 0, 1, 1, 1];
    for kind in [ModelKind::Mosaic, ModelKind::Rotary] {
        let model = random_model(small_config(kind), 10);
        assert!(model.params().numel() <= 1000, "{}", model.params().numel());
        let err = model_gradient_error(&model, &tokens, &docs, 2);
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn strip_then_restore_is_identity() {
    let model = random_model(config(ModelKind::Mosaic), 11);
    let tokens: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % 11).collect();
    let before = model.logits(&tokens, &[0; 24], 2).unwrap();
    let (stripped, backup) = strip_long_term(&model).unwrap();
    let cut = stripped.logits(&tokens, &[0; 24], 2).unwrap();
    assert!(cut.max_abs_diff(&before) > 1e-6);
    assert!(stripped.active_param_count() < model.active_param_count());
    let restored = restore_long_term(stripped, backup);
    assert_eq!(restored.logits(&tokens, &[0; 24], 2).unwrap(), before);
    assert!(strip_long_term(&random_model(config(ModelKind::Rotary), 1)).is_err());
}

#[test]
fn stripping_leaves_first_layer_short_term_untouched() {
    let model = random_model(config(ModelKind::Mosaic), 12);
    let (stripped, _) = strip_long_term(&model).unwrap();
    let tokens: Vec<usize> = (0..20).map(|i| (i * 5 + 1) % 11).collect();
    let short_outputs = |m: &Model| {
        let mut g = Graph::new();
        let vars = m.params().bind(&mut g, false);
        let out = m.forward(&mut g, &vars, &tokens, &[0; 20], 2).unwrap();
        out.retrievals
            .iter()
            .filter(|r| r.layer == 0 && r.source == Source::Memory(Memory::Short))
            .map(|r| g.value(r.node).clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(short_outputs(&model), short_outputs(&stripped));
}

#[test]
fn runs_beyond_training_length() {
    for kind in [ModelKind::Mosaic, ModelKind::Rotary] {
        let model = random_model(config(kind), 13);
        let len = 4 * model.config().max_seq_len;
        let tokens: Vec<usize> = (0..len).map(|i| i % 11).collect();
        let logits = model.eval_logits(&tokens).unwrap();
        assert_eq!(logits.shape(), &[len, 11]);
        assert!(logits.is_finite());
    }
}

#[test]
fn packed_documents_do_not_interact() {
    for kind in [ModelKind::Mosaic, ModelKind::Rotary] {
        let model = random_model(config(kind), 14);
        let a = [1, 4, 4, 9, 2, 6, 3];
        let b = [1, 8, 3, 3, 10, 5];
        let mut packed = a.to_vec();
        packed.extend_from_slice(&b);
        let ids: Vec<usize> = (0..13).map(|t| usize::from(t >= 7)).collect();
        let joint = model.logits(&packed, &ids, 2).unwrap();
        let alone_a = model.logits(&a, &[0; 7], 2).unwrap();
        let alone_b = model.logits(&b, &[0; 6], 2).unwrap();
        for t in 0..7 {
            for (x, y) in joint.row(t).iter().zip(alone_a.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for t in 0..6 {
            for (x, y) in joint.row(t + 7).iter().zip(alone_b.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rejects_out_of_vocabulary_tokens() {
    let model = random_model(config(ModelKind::Mosaic), 15);
    assert!(model.eval_logits(&[1, 11]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_model(config(ModelKind::Rotary), 16);
    let path = dir.path().join("ckpt");
    save_model(&path, &model, serde_json::json!({"seed": 16})).unwrap();
    assert!(path.join("embed.bin").exists() && path.join("embed.json").exists());
    let back = load_model(&path).unwrap();
    assert_eq!(back.eval_logits(&TOKENS).unwrap(), model.eval_logits(&TOKENS).unwrap());

    let (stripped, _) = strip_long_term(&random_model(config(ModelKind::Mosaic), 17)).unwrap();
    save_model(&path, &stripped, serde_json::Value::Null).unwrap();
    let back = load_model(&path).unwrap();
    assert!(!back.long_term_enabled());
    assert!(load_model(&dir.path().join("missing")).is_err());
}
