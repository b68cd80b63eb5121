//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use typespan::baseline::SpanClassifier;
use typespan::datasets::{degrade_distant, synth, DegradeConfig, DescriptionMode, LabeledDocument, Mention};
use typespan::decoder::{
    brute_force_reference, decode, remove_overlap, score_all, DecodeConfig, ScoredMention, Strategy, ThresholdMode,
};
use typespan::encoder::{EncodedSequence, EncoderConfig};
use typespan::head::{HeadConfig, HeadParams, TypeEmbeddings};
use typespan::metrics::{loose_span_prf, per_type_report, strict_end_prf, strict_span_prf, strict_start_prf, Triple};
use typespan::model::{build_vocab, Model, ModelConfig, Objective};
use typespan::objectives::{
    augmented_loss, combine, plain_loss_no_threshold, total_loss, GlobalThresholds, LossInput, LossWeights,
};
use typespan::trainer::{evaluate, fit, tune_global_thresholds_on_dev, ThresholdGrid, TrainConfig};
use typespan_numcore::{grad_check, normal_tensor, Graph, NumError, ParamStore, Result as NumResult, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

type Build = fn(&mut Graph, &[Var]) -> NumResult<Var>;

fn op_cases() -> Vec<(&'static str, Vec<&'static [usize]>, Build)> {
    vec![
        ("matmul", vec![&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", vec![&[3, 4], &[2, 4]], |g, v| g.matmul_nt(v[0], v[1])),
        ("matmul_tn", vec![&[4, 3], &[4, 2]], |g, v| g.matmul_t(v[0], v[1], true, false)),
        ("matmul_tt", vec![&[4, 3], &[2, 4]], |g, v| g.matmul_t(v[0], v[1], true, true)),
        ("add_n", vec![&[2, 3], &[2, 3], &[2, 3]], |g, v| g.add_n(&[v[0], v[1], v[2]])),
        ("dropout", vec![&[4, 5]], |g, v| {
            let taken = std::mem::replace(g, Graph::new());
            *g = taken.train(7);
            g.dropout(v[0], 0.3)
        }),
        ("add", vec![&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![&[5]], |g, v| g.scale(v[0], -0.7)),
        ("div_scalar", vec![&[5]], |g, v| g.div_scalar(v[0], 0.07)),
        ("mul_scalar_var", vec![&[2, 3], &[]], |g, v| g.mul_scalar_var(v[0], v[1])),
        ("exp", vec![&[4]], |g, v| g.exp(v[0])),
        ("tile_rows", vec![&[3]], |g, v| g.tile_rows(v[0], 4)),
        ("concat_cols", vec![&[2, 3], &[2, 2]], |g, v| g.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("slice_cols", vec![&[3, 5]], |g, v| g.slice_cols(v[0], 1, 4)),
        ("slice_rows", vec![&[4, 2]], |g, v| g.slice_rows(v[0], 1, 3)),
        ("gather_rows", vec![&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        ("pick", vec![&[3, 3]], |g, v| g.pick(v[0], &[8, 0, 4, 4])),
        ("column", vec![&[3, 4]], |g, v| g.column(v[0], 2)),
        ("reshape", vec![&[2, 3]], |g, v| g.reshape(v[0], &[3, 2])),
        ("layer_norm", vec![&[3, 6]], |g, v| g.layer_norm(v[0], 1e-12)),
        ("softmax_rows", vec![&[3, 4]], |g, v| g.softmax_rows(v[0])),
        ("log_sum_exp", vec![&[6]], |g, v| g.log_sum_exp(v[0])),
        ("gelu", vec![&[7]], |g, v| g.gelu(v[0])),
        ("relu", vec![&[7]], |g, v| g.relu(v[0])),
        ("sum", vec![&[2, 2]], |g, v| g.sum(v[0])),
        ("mean", vec![&[2, 2]], |g, v| g.mean(v[0])),
        ("l2_norm_rows", vec![&[3, 4]], |g, v| g.l2_norm_rows(v[0])),
        ("normalize_rows", vec![&[3, 4]], |g, v| g.normalize_rows(v[0])),
        ("cosine_matrix", vec![&[3, 4], &[2, 4]], |g, v| g.cosine_matrix(v[0], v[1])),
        ("cosine", vec![&[5], &[5]], |g, v| g.cosine(v[0], v[1])),
        ("linear", vec![&[3, 4], &[4, 2], &[2]], |g, v| g.linear(v[0], v[1], v[2])),
        ("span_compose", vec![&[4, 3], &[4, 3], &[3, 3]], |g, v| {
            g.span_compose(v[0], v[1], v[2], &[(0, 0), (0, 2), (1, 3), (2, 2), (3, 3)])
        }),
        ("info_nce", vec![&[6]], |g, v| g.info_nce(v[0], 2, &[0, 1, 4, 5])),
        ("softmax_cross_entropy", vec![&[3, 4]], |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1])),
    ]
}

fn op_worst_error(shapes: &[&[usize]], build: Build) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.insert(format!("p{i}"), normal_tensor(&mut rng, s, 1.0)).unwrap())
            .collect();
        let report = grad_check(&mut store, 1e-5, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = build(g, &vars)?;
            let shape = g.shape(out).to_vec();
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let w = g.constant(normal_tensor(&mut wr, &shape, 1.0))?;
            let prod = g.mul(out, w)?;
            g.sum(prod)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn toy_batch_model(seed: u64) -> (Model, Vec<LabeledDocument>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "tau", "rho"];
    let mut types = synth::type_defs();
    types.truncate(2);
    let docs: Vec<LabeledDocument> = (0..2)
        .map(|d| {
            let n = rng.random_range(5..9);
            let text: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
            let mut mentions = Vec::new();
            for _ in 0..2 {
                let s = rng.random_range(0..n);
                let e = (s + rng.random_range(0..3)).min(n - 1);
                mentions.push(Mention::new(s, e, types[rng.random_range(0..2)].name.clone()));
            }
            mentions.sort_by_key(|m| (m.start_token, m.end_token));
            mentions.dedup_by_key(|m| (m.start_token, m.end_token));
            LabeledDocument::from_text(format!("toy-{d}"), text.join(" "), mentions).unwrap()
        })
        .collect();
    let vocab = build_vocab(&docs, &types);
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 16,
            ffn_dim: 32,
            max_positions: 40,
            dropout: 0.0,
        },
        head: HeadConfig {
            d_model: 16,
            d_proj: 8,
            width_dim: 8,
            width_rows: 40,
            init_temperature: 0.07,
            shared_linear: false,
        },
        description_mode: DescriptionMode::Keyword,
        max_seq_len: 14,
        stride: 4,
        decode: DecodeConfig {
            max_span_len: 4,
            ..DecodeConfig::default()
        },
    };
    (Model::init(config, vocab, types, seed).unwrap(), docs)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, shapes, build) in op_cases() {
        let e = op_worst_error(&shapes, build);
        if e >= worst_op.1 {
            worst_op = (name, e);
        }
    }
    let (model, docs) = toy_batch_model(2024);
    let examples: Vec<_> = docs.iter().flat_map(|d| model.examples(d).unwrap()).collect();
    let batch: Vec<_> = examples.iter().collect();
    let weights = LossWeights::default();
    let mut store = model.store.clone();
    let report = grad_check(&mut store, 1e-5, |g| {
        model
            .batch_loss(g, &batch, &weights, Objective::Dynamic)
            .map(|b| b.total)
            .map_err(|e| NumError::Invalid(e.to_string()))
    })
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_op.1 < 1e-6 && report.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "{} ops x 100 seeds worst {:.2e} ({}); full loss over {} sequences, {} values: {:.2e}; {:.1} s",
            op_cases().len(),
            worst_op.1,
            worst_op.0,
            batch.len(),
            report.checked,
            report.max_rel_error,
            secs
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut worst_uniform: f64 = 0.0;
    for k in [1usize, 4, 9] {
        let mut g = Graph::new();
        let s = g.input(Tensor::full(&[k + 1], 0.37), false).unwrap();
        let negs: Vec<usize> = (1..=k).collect();
        let l = g.info_nce(s, 0, &negs).unwrap();
        worst_uniform = worst_uniform.max((g.scalar_value(l) - ((k + 1) as f64).ln()).abs());
    }

    let (model, docs) = toy_batch_model(7);
    let examples: Vec<_> = docs.iter().flat_map(|d| model.examples(d).unwrap()).collect();
    let mut aug_gap: f64 = 0.0;
    {
        let mut g = Graph::with_params(&model.store);
        let h_cls = model.type_summaries(&mut g, true).unwrap();
        let types = model.head.type_embeddings(&mut g, h_cls).unwrap();
        let mut scores = Vec::new();
        for ex in &examples {
            let h = model.text_encoder.forward(&mut g, &ex.ids).unwrap();
            scores.push(model.head.sequence_scores(&mut g, h, &types, &ex.targets.spans).unwrap());
        }
        let inputs: Vec<LossInput> = scores
            .into_iter()
            .zip(&examples)
            .map(|(scores, ex)| LossInput {
                scores,
                targets: &ex.targets,
            })
            .collect();
        let w1 = LossWeights {
            beta: 1.0,
            ..LossWeights::default()
        };
        let aug = total_loss(&mut g, &inputs, &w1).unwrap();
        let plain = plain_loss_no_threshold(&mut g, &inputs, &w1).unwrap();
        aug_gap = aug_gap.max((g.scalar_value(aug.total) - g.scalar_value(plain.total)).abs());
        for ch in [aug.start, aug.end, aug.span] {
            let a = augmented_loss(&mut g, ch.positive, ch.threshold, 1.0).unwrap();
            aug_gap = aug_gap.max((g.scalar_value(a) - g.scalar_value(ch.positive)).abs());
        }
    }

    let mut g = Graph::new();
    let (ls, le, lp) = (1.7, 0.4, 2.9);
    let vs = g.input(Tensor::scalar(ls), false).unwrap();
    let ve = g.input(Tensor::scalar(le), false).unwrap();
    let vp = g.input(Tensor::scalar(lp), false).unwrap();
    let total = combine(&mut g, vs, ve, vp, &LossWeights::default()).unwrap();
    let hand = 0.2 * 1.7 + 0.2 * 0.4 + 0.6 * 2.9;
    let combine_gap = (g.scalar_value(total) - hand).abs();

    outcome(
        worst_uniform < 1e-9 && aug_gap < 1e-12 && combine_gap < 1e-12,
        format!("ln(K+1) gap {worst_uniform:.1e}; beta=1 gap {aug_gap:.1e}; weighted sum gap {combine_gap:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn random_instance(rng: &mut ChaCha8Rng) -> (EncodedSequence, TypeEmbeddings, HeadParams, ParamStore, DecodeConfig) {
    let n = rng.random_range(0..=12usize);
    let k = rng.random_range(1..=3usize);
    let d = 6;
    let config = HeadConfig {
        d_model: d,
        d_proj: 5,
        width_dim: 3,
        width_rows: 16,
        init_temperature: rng.random_range(0.05..0.5),
        shared_linear: rng.random_bool(0.3),
    };
    let mut store = ParamStore::new();
    let head = HeadParams::init(&mut store, &config, rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        if !store.name(id).starts_with("head.log_tau") {
            *store.get_mut(id) = normal_tensor(rng, &shape, 1.0);
        }
    }
    let global = GlobalThresholds::init(&mut store, k).unwrap();
    for id in global.ids {
        *store.get_mut(id) = normal_tensor(rng, &[k], 3.0);
    }
    let hidden = normal_tensor(rng, &[n + 2, d], 1.0);
    let types = TypeEmbeddings {
        e: normal_tensor(rng, &[k, 5], 1.0),
        e_b: normal_tensor(rng, &[k, 5], 1.0),
        e_q: normal_tensor(rng, &[k, 5], 1.0),
    };
    let threshold_mode = if rng.random_bool(0.5) {
        ThresholdMode::Dynamic
    } else {
        ThresholdMode::LearnedGlobal
    };
    let decode_cfg = DecodeConfig {
        strategy: Strategy::SpanOnly,
        flat: false,
        max_span_len: rng.random_range(1..=12),
        threshold_mode,
    };
    let encoded = EncodedSequence {
        token_ids: vec![0; n + 2],
        hidden,
    };
    (encoded, types, head, store, decode_cfg)
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut checked = 0;
    let mut predicted = 0;
    for _ in 0..200 {
        let (enc, types, head, store, base) = random_instance(&mut rng);
        for strategy in [Strategy::SpanOnly, Strategy::JointPositionSpan] {
            for flat in [false, true] {
                let cfg = DecodeConfig {
                    strategy,
                    flat,
                    ..base.clone()
                };
                let (cands, th) = score_all(&enc, &types, &head, &store, &cfg).unwrap();
                let got: BTreeSet<Triple> = decode(&cands, &th, &cfg).iter().map(ScoredMention::key).collect();
                let want = brute_force_reference(&enc, &types, &head, &store, &cfg).unwrap();
                predicted += got.len();
                checked += 1;
                if got != want {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 120.0,
        format!("{checked} decodes ({predicted} mentions), {mismatches} mismatches; {secs:.1} s"),
    )
}

// ---------------------------------------------------------------- 4

fn sm(start: usize, end: usize, type_id: usize, score: f64) -> ScoredMention {
    ScoredMention {
        start,
        end,
        type_id,
        span_score: score,
        start_score: 0.0,
        end_score: 0.0,
    }
}

fn keys(v: &[ScoredMention]) -> Vec<Triple> {
    let mut k: Vec<Triple> = v.iter().map(ScoredMention::key).collect();
    k.sort();
    k
}

fn criterion_4() -> Outcome {
    let fixtures: Vec<(Vec<ScoredMention>, Vec<Triple>)> = vec![
        (vec![sm(0, 2, 0, 0.9), sm(1, 3, 1, 0.8), sm(4, 5, 2, 0.7)], vec![(0, 2, 0), (4, 5, 2)]),
        (vec![sm(2, 3, 0, 0.5), sm(0, 1, 0, 0.5), sm(1, 2, 1, 0.5)], vec![(0, 1, 0), (2, 3, 0)]),
        (vec![sm(0, 1, 1, 0.7), sm(0, 1, 0, 0.7)], vec![(0, 1, 0)]),
        (vec![sm(0, 5, 0, 0.6), sm(1, 2, 0, 0.9), sm(3, 4, 1, 0.8)], vec![(1, 2, 0), (3, 4, 1)]),
        (vec![sm(0, 1, 0, 0.5), sm(1, 2, 0, 0.9), sm(2, 3, 0, 0.5)], vec![(1, 2, 0)]),
        (vec![sm(0, 3, 0, 0.4), sm(0, 3, 1, 0.4), sm(3, 3, 0, 0.4)], vec![(0, 3, 0)]),
        (vec![sm(5, 6, 0, 0.3), sm(0, 0, 1, 0.3), sm(6, 7, 0, 0.3)], vec![(0, 0, 1), (5, 6, 0)]),
        (Vec::new(), Vec::new()),
    ];
    let mut fixture_fail = 0;
    for (input, want) in &fixtures {
        if keys(&remove_overlap(input)) != *want {
            fixture_fail += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cands = Vec::new();
    for i in 0..10 {
        for j in i..(i + 3).min(10) {
            for t in 0..2 {
                cands.push(sm(i, j, t, [0.1, 0.2, 0.3][rng.random_range(0..3)]));
            }
        }
    }
    let reference = remove_overlap(&cands);
    let mut perm_fail = 0;
    for _ in 0..1000 {
        let mut shuffled = cands.clone();
        shuffled.shuffle(&mut rng);
        if remove_overlap(&shuffled) != reference {
            perm_fail += 1;
        }
    }
    outcome(
        fixture_fail == 0 && perm_fail == 0,
        format!(
            "{} fixtures, {fixture_fail} wrong; 1000 shuffles of {} tied candidates, {perm_fail} differ",
            fixtures.len(),
            cands.len()
        ),
    )
}

// ---------------------------------------------------------------- 5-7, 9

struct Corpus {
    train: Vec<LabeledDocument>,
    dev: Vec<LabeledDocument>,
    test: Vec<LabeledDocument>,
}

fn corpus() -> Corpus {
    let docs = synth::generate(2025, 2400);
    Corpus {
        train: docs[..2000].to_vec(),
        dev: docs[2000..2200].to_vec(),
        test: docs[2200..].to_vec(),
    }
}

fn acceptance_train_config(mode: ThresholdMode) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_steps: Some(1000),
        eval_every_steps: 100,
        threshold_mode: mode,
        ..TrainConfig::default()
    }
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            d_model: 64,
            ..EncoderConfig::default()
        },
        description_mode: DescriptionMode::Guideline,
        ..ModelConfig::default()
    }
}

fn train_model(c: &Corpus, train: &[LabeledDocument], mode: ThresholdMode) -> (Model, f64) {
    let cfg = acceptance_train_config(mode);
    let types = synth::type_defs();
    let vocab = build_vocab(&c.train, &types);
    let mut model = Model::init(cfg.apply_to(&toy_model_config()), vocab, types, 11).unwrap();
    let t = Instant::now();
    fit(&mut model, train, &c.dev, &cfg, &mut std::io::sink(), None).unwrap();
    (model, t.elapsed().as_secs_f64())
}

fn criterion_5(c: &Corpus, model: &Model, secs: f64) -> Outcome {
    let pred = model.predict_triples(&c.test, &model.config.decode).unwrap();
    let gold = model.gold_triples(&c.test).unwrap();
    let f1 = strict_span_prf(&pred, &gold).f1;
    let mut nested_pairs = 0;
    let mut both = 0;
    for (p, g) in pred.iter().zip(&gold) {
        for a in g {
            for b in g {
                if a != b && a.0 <= b.0 && b.1 <= a.1 {
                    nested_pairs += 1;
                    if p.contains(a) && p.contains(b) {
                        both += 1;
                    }
                }
            }
        }
    }
    outcome(
        f1 >= 0.95 && both >= 1 && secs < 900.0,
        format!("test S-F1 {f1:.4}; {both}/{nested_pairs} nested pairs fully recovered; trained in {secs:.0} s"),
    )
}

fn criterion_6(c: &Corpus, dynamic: &Model) -> Outcome {
    let (global, _) = train_model(c, &c.train, ThresholdMode::LearnedGlobal);
    let (tuned, _) = train_model(c, &c.train, ThresholdMode::DevTuned(Vec::new()));
    let tuned_dev = tune_global_thresholds_on_dev(&tuned, &c.dev, &ThresholdGrid::Quantiles(50)).unwrap();
    let f_dyn = evaluate(dynamic, &c.test).unwrap();
    let f_glob = evaluate(&global, &c.test).unwrap();
    let f_tuned = evaluate(&tuned, &c.test).unwrap();
    println!("    threshold            test S-F1");
    println!("    dynamic              {f_dyn:.4}");
    println!("    learned global       {f_glob:.4}");
    println!("    dev-tuned global     {f_tuned:.4}   (dev {:.4})", tuned_dev.f1);
    outcome(
        f_dyn >= f_glob - 0.02 && f_dyn >= f_tuned - 0.02,
        format!("dynamic {f_dyn:.4}, learned global {f_glob:.4}, dev-tuned {f_tuned:.4}"),
    )
}

fn criterion_7(c: &Corpus, clean: &Model) -> Outcome {
    let (degraded, record) = degrade_distant(&c.train, &DegradeConfig::uniform(0.5, 0.0, 77)).unwrap();
    let (noisy, _) = train_model(c, &degraded, ThresholdMode::Dynamic);
    let cfg = acceptance_train_config(ThresholdMode::Dynamic);
    let mut clf = SpanClassifier::init(
        cfg.apply_to(&toy_model_config()),
        clean.vocab.clone(),
        clean.type_index.clone(),
        11,
    )
    .unwrap();
    fit(&mut clf, &degraded, &c.dev, &cfg, &mut std::io::sink(), None).unwrap();
    let f_clean = evaluate(clean, &c.test).unwrap();
    let f_noisy = evaluate(&noisy, &c.test).unwrap();
    let f_base = clf.evaluate(&c.test).unwrap();
    let retained = f_noisy / f_clean;
    outcome(
        retained >= 0.85 && f_noisy >= f_base,
        format!(
            "dropped {} train mentions; dynamic {f_noisy:.4} = {:.1}% of clean {f_clean:.4}; explicit-Outside baseline {f_base:.4}",
            record.dropped.len(),
            100.0 * retained
        ),
    )
}

fn criterion_9(c: &Corpus, model: &Model) -> Outcome {
    let types = model.type_embeddings().unwrap();
    let docs = &c.test[..100];
    let differing = docs
        .iter()
        .filter(|d| model.predict(d, &types).unwrap() != model.predict_uncached(d).unwrap())
        .count();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    model.save(&ckpt, &serde_json::Value::Null).unwrap();
    let corpus_path = dir.path().join("docs.jsonl");
    typespan::datasets::save_corpus(&corpus_path, docs).unwrap();
    let out = dir.path().join("bench");
    let code = run_cli(&[
        "bench",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus_path.to_str().unwrap(),
        "--repeats",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let bench: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap_or_default()).unwrap_or_default();
    let cached = bench["cached"]["tokens_per_sec"].as_f64().unwrap_or(0.0);
    let uncached = bench["uncached"]["tokens_per_sec"].as_f64().unwrap_or(f64::INFINITY);
    outcome(
        code == 0 && differing == 0 && cached >= 0.95 * uncached,
        format!(
            "{differing}/100 documents differ; bench cached {cached:.0} tok/s vs uncached {uncached:.0} tok/s ({:.2}x)",
            cached / uncached
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let pred: Vec<Vec<Triple>> = vec![vec![(0, 1, 0), (3, 4, 1), (5, 6, 0), (9, 9, 1)], vec![(2, 2, 0)]];
    let gold: Vec<Vec<Triple>> = vec![vec![(0, 1, 0), (3, 3, 1), (5, 7, 0)], vec![(2, 2, 1)]];
    let report = per_type_report(&pred, &gold, &["A".to_string(), "B".to_string()]);
    // (matched predicted, predicted, matched gold, gold) for span, start, end, loose.
    let expected: [(&str, [(usize, usize, usize, usize); 4], [f64; 4]); 3] = [
        (
            "A",
            [(1, 3, 1, 2), (2, 3, 2, 2), (1, 3, 1, 2), (2, 3, 2, 2)],
            [0.4, 0.8, 0.4, 0.8],
        ),
        (
            "B",
            [(0, 2, 0, 2), (1, 2, 1, 2), (0, 2, 0, 2), (1, 2, 1, 2)],
            [0.0, 0.5, 0.0, 0.5],
        ),
        (
            "ALL",
            [(1, 5, 1, 4), (3, 5, 3, 4), (1, 5, 1, 4), (3, 5, 3, 4)],
            [2.0 / 9.0, 2.0 / 3.0, 2.0 / 9.0, 2.0 / 3.0],
        ),
    ];
    let rows: Vec<_> = report.per_type.iter().chain([&report.micro]).collect();
    let mut grid_fail = 0;
    for (row, (name, counts, f1s)) in rows.iter().zip(&expected) {
        let cells = [&row.strict_span, &row.strict_start, &row.strict_end, &row.loose_span];
        for ((prf, c), f) in cells.iter().zip(counts).zip(f1s) {
            let got = (prf.matched_predicted, prf.predicted, prf.matched_gold, prf.gold);
            if row.name != *name || got != *c || (prf.f1 - f).abs() > 1e-12 {
                grid_fail += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    let random_doc = |rng: &mut ChaCha8Rng| -> Vec<Triple> {
        (0..rng.random_range(0..8))
            .map(|_| {
                let s = rng.random_range(0..10);
                (s, s + rng.random_range(0..3), rng.random_range(0..2))
            })
            .collect()
    };
    for _ in 0..100 {
        let docs = rng.random_range(1..5);
        let gold: Vec<Vec<Triple>> = (0..docs).map(|_| random_doc(&mut rng)).collect();
        let pred: Vec<Vec<Triple>> = gold
            .iter()
            .map(|g| {
                let mut p = Vec::new();
                for &(s, e, t) in g {
                    if rng.random_bool(0.6) {
                        p.push(match rng.random_range(0..3) {
                            0 => (s, e, t),
                            1 => (s, e + 1, t),
                            _ => (s.saturating_sub(1), e, t),
                        });
                    }
                }
                p.extend(random_doc(&mut rng).into_iter().take(2));
                p
            })
            .collect();
        let span = strict_span_prf(&pred, &gold).f1;
        let eps = 1e-12;
        if loose_span_prf(&pred, &gold).f1 + eps < span
            || strict_start_prf(&pred, &gold).f1 + eps < span
            || strict_end_prf(&pred, &gold).f1 + eps < span
        {
            violations += 1;
        }
    }
    outcome(
        grid_fail == 0 && violations == 0,
        format!("4x3 grid, {grid_fail} wrong cells; 100 random prediction sets, {violations} invariant violations"),
    )
}

// ---------------------------------------------------------------- 10

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["typespan"];
    argv.extend_from_slice(args);
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = typespan_cli::main_with_args(argv, &mut out, &mut err);
    if code != 0 {
        eprintln!("{}", String::from_utf8_lossy(&err));
    }
    code
}

fn without_timings(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let code = run_cli(&[
        "synth",
        "--seed",
        "10",
        "--train-docs",
        "200",
        "--dev-docs",
        "40",
        "--test-docs",
        "0",
        "--out",
        data.to_str().unwrap(),
    ]);
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "data.train = {0}/train.jsonl\ndata.dev = {0}/dev.jsonl\ndata.types = {0}/types.json\n\
             encoder.d_model = 32\nencoder.ffn_dim = 64\nhead.d_proj = 32\nhead.width_dim = 16\n\
             train.learning_rate = 0.001\ntrain.max_steps = 40\ntrain.eval_every_steps = 10\ntrain.seed = 5\n",
            data.display()
        ),
    )
    .unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            let c = run_cli(&["train", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            (c, out)
        })
        .collect();
    let codes_ok = code == 0 && runs.iter().all(|(c, _)| *c == 0);
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    let mut same = Vec::new();
    for f in ["checkpoint/params.bin", "checkpoint/model.json", "checkpoint/vocab.txt", "train_log.jsonl"] {
        let (a, b) = (read(&runs[0].1.join(f)), read(&runs[1].1.join(f)));
        same.push(!a.is_empty() && a == b);
    }
    let manifests_equal = codes_ok && without_timings(&runs[0].1.join("manifest.json")) == without_timings(&runs[1].1.join("manifest.json"));
    let identical = same.iter().filter(|s| **s).count();
    outcome(
        codes_ok && identical == same.len() && manifests_equal,
        format!(
            "{identical}/{} artifacts byte-identical across two seeded runs; manifests equal without timings: {manifests_equal}",
            same.len()
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient correctness", criterion_1());
    report(2, "closed-form losses", criterion_2());
    report(3, "decode oracle equivalence", criterion_3());
    report(4, "overlap removal", criterion_4());
    report(8, "metrics correctness", criterion_8());
    report(10, "reproducibility", criterion_10());

    let c = corpus();
    let (clean, secs) = train_model(&c, &c.train, ThresholdMode::Dynamic);
    report(5, "synthetic supervised learning", criterion_5(&c, &clean, secs));
    report(6, "thresholding ablation", criterion_6(&c, &clean));
    report(7, "distant-supervision robustness", criterion_7(&c, &clean));
    report(9, "bi-encoder reuse", criterion_9(&c, &clean));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
