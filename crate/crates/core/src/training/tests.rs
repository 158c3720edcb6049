use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::corpus::{build_parallel_corpus, build_qa_corpus, generate_kb, make_languages, ParallelCorpus, QaItem, Split};
use crate::model::{ModelConfig, SutraPipeline};
use crate::numerics::check::{check_gradients, check_param_gradients};
use crate::numerics::{Graph, Tensor};
use crate::tokenizer::{TokenizerModel, EOS_ID};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 8,
        n_experts: 2,
        top_k: 1,
        context_window: 128,
        vocab_size: TokenizerModel::bytes_only().vocab_size(),
        enc_layers: 1,
        dec_layers: 1,
        enc_heads: 2,
        dec_heads: 2,
        moe_every_k_layers: 1,
        n_languages: 2,
        seed: 5,
    }
}

fn world() -> (SutraPipeline, ParallelCorpus, Vec<QaItem>) {
    let langs = make_languages(2);
    let kb = generate_kb(3, 200).unwrap();
    let corpus = build_parallel_corpus(&kb, &langs, [0.8, 0.1, 0.1], 3).unwrap();
    let qa = build_qa_corpus(&kb, &langs, 10, 3).unwrap();
    let p = SutraPipeline::new(tiny_config(), TokenizerModel::bytes_only(), corpus.langs.clone()).unwrap();
    (p, corpus, qa)
}

fn quick(phase: u8, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        ..TrainConfig::for_phase(phase)
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Scalar loops over every pair, independent of the graph ops.
fn alignment_oracle(a: &[Vec<f64>], b: &[Vec<f64>], margin: f64, lambda: f64) -> (f64, f64) {
    let n = a.len();
    let cosine = (0..n).map(|i| 1.0 - cos(&a[i], &b[i])).sum::<f64>() / n as f64;
    let mut contrast = 0.0;
    for i in 0..n {
        let pos = cos(&a[i], &b[i]);
        let hardest = (0..n)
            .filter(|&j| j != i)
            .map(|j| cos(&a[i], &b[j]))
            .fold(f64::NEG_INFINITY, f64::max);
        contrast += (margin + hardest - pos).max(0.0);
    }
    (cosine, cosine + lambda * contrast / n as f64)
}

fn eval_alignment(a: &Tensor, b: &Tensor, margin: f64, lambda: f64) -> (f64, f64, Option<f64>) {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let t = alignment_loss(&mut g, va, vb, margin, lambda).unwrap();
    (
        g.value(t.cosine).item(),
        g.value(t.total).item(),
        t.contrast.map(|c| g.value(c).item()),
    )
}

#[test]
fn alignment_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let (c, _, _) = eval_alignment(&a, &a, 0.2, 1.0);
    assert!(c.abs() < 1e-15);

    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let a = Tensor::from_rows(&[e(0), e(1)]).unwrap();
    let b = Tensor::from_rows(&[e(2), e(3)]).unwrap();
    let (c, _, _) = eval_alignment(&a, &b, 0.2, 1.0);
    assert!((c - 1.0).abs() < 1e-15);

    let one = Tensor::randn(&[1, 6], 1.0, &mut rng);
    let (c, total, contrast) = eval_alignment(&one, &one, 0.2, 1.0);
    assert!(contrast.is_none());
    assert_eq!(c, total);
}

#[test]
fn alignment_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let b = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let (c, total, _) = eval_alignment(&a, &b, 0.2, 0.7);
        let (oc, ototal) = alignment_oracle(&rows(&a), &rows(&b), 0.2, 0.7);
        assert!((c - oc).abs() < 1e-10);
        assert!((total - ototal).abs() < 1e-10);
    }
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let report = check_gradients(&[a, b], 1e-5, |g, v| {
        Ok(alignment_loss(g, v[0], v[1], 0.2, 1.0)?.total)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn alignment_rejects_mismatched_batches() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[2, 4]));
    assert!(alignment_loss(&mut g, a, b, 0.2, 1.0).is_err());
}

fn toy_batch(p: &SutraPipeline, corpus: &ParallelCorpus, n: usize) -> Vec<TranslationExample> {
    corpus
        .split(Split::Train)
        .take(n)
        .enumerate()
        .map(|(i, it)| {
            let (s, t) = if i % 2 == 0 { (0, 1) } else { (1, 0) };
            TranslationExample::new(p, &it.texts[&p.langs[s]], s, &it.texts[&p.langs[t]], t)
        })
        .collect()
}

#[test]
fn translation_loss_matches_manual_cross_entropy() {
    let (p, corpus, _) = world();
    let batch = toy_batch(&p, &corpus, 3);
    let mut g = Graph::new();
    let loss = translation_loss(&mut g, &p, &batch).unwrap();
    let got = g.value(loss).item();

    // Per-sequence decoder logits, then a scalar log-sum-exp per token.
    let mut total = 0.0;
    let mut count = 0;
    for e in &batch {
        let mut g = Graph::new();
        let (enc, mem) = p.encode(&mut g, &[(&e.source, e.source_lang)]).unwrap();
        let c = p.concept_transform(&mut g, enc, &mem).unwrap();
        let (logits, _) = p.decode(&mut g, c.hidden, &mem, &[(&e.target_input, e.target_lang)]).unwrap();
        let l = g.value(logits);
        for (t, &label) in e.target_labels.iter().enumerate() {
            let row = l.row(t);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[label as usize];
            count += 1;
        }
    }
    assert!((got - total / count as f64).abs() < 1e-10);
}

#[test]
fn translation_loss_limits() {
    let (mut p, corpus, _) = world();
    let d = p.config.d_model;
    let v = p.config.vocab_size;
    let dec = p.modules.decoder.clone();

    // Zero output embedding: uniform logits.
    *p.store.value_mut(dec.tok_emb) = Tensor::zeros(&[v, d]);
    let batch = toy_batch(&p, &corpus, 2);
    let mut g = Graph::new();
    let l = translation_loss(&mut g, &p, &batch).unwrap();
    assert!((g.value(l).item() - (v as f64).ln()).abs() < 1e-12);

    // Constant unit hidden row and a large EOS embedding along it.
    *p.store.value_mut(dec.final_norm.gain) = Tensor::zeros(&[d]);
    let mut bias = vec![0.0; d];
    bias[0] = 1.0;
    *p.store.value_mut(dec.final_norm.bias) = Tensor::new(vec![d], bias).unwrap();
    let mut emb = Tensor::zeros(&[v, d]);
    emb.data_mut()[EOS_ID as usize * d] = 40.0;
    *p.store.value_mut(dec.tok_emb) = emb;
    let eos_only = TranslationExample {
        source: vec![70, 71, EOS_ID],
        source_lang: 0,
        target_input: vec![crate::tokenizer::BOS_ID],
        target_labels: vec![EOS_ID],
        target_lang: 1,
    };
    let mut g = Graph::new();
    let l = translation_loss(&mut g, &p, &[eos_only]).unwrap();
    assert!(g.value(l).item() < 1e-12);
}

#[test]
fn translation_loss_rejects_long_sequences() {
    let (p, _, _) = world();
    let long = TranslationExample {
        source: vec![70; 129],
        source_lang: 0,
        target_input: vec![1],
        target_labels: vec![2],
        target_lang: 1,
    };
    let mut g = Graph::new();
    assert!(matches!(
        translation_loss(&mut g, &p, &[long]),
        Err(Error::Context { len: 129, window: 128 })
    ));
}

#[test]
fn translation_gradient_matches_finite_differences() {
    let (p, corpus, _) = world();
    let batch: Vec<TranslationExample> = toy_batch(&p, &corpus, 2)
        .into_iter()
        .map(|mut e| {
            e.source.truncate(6);
            e.target_input.truncate(5);
            e.target_labels.truncate(5);
            e
        })
        .collect();
    let mut store = p.store.clone();
    // Embedding tables are mostly unused rows; the layers carry the check.
    for id in store.ids().collect::<Vec<_>>() {
        let frozen = store.name(id).ends_with("tok_emb");
        store.set_frozen(id, frozen);
    }
    let report = check_param_gradients(&mut store, 1e-5, 3, |g, st| {
        let mut q = p.clone();
        q.store = st.clone();
        translation_loss(g, &q, &batch)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn config_validation_and_json() {
    assert!(TrainConfig::for_phase(2).freeze.concept);
    assert!(!TrainConfig::for_phase(3).freeze.concept);
    let bad = TrainConfig {
        phase: 9,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("invalid phase 9")));
    let bad = TrainConfig {
        lambda_align: -1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let c = TrainConfig::for_phase(2);
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"phase": 1, "lr": 0.1}"#).is_err());
}

#[test]
fn warmup_is_linear_then_constant() {
    let c = TrainConfig {
        steps: 100,
        learning_rate: 1.0,
        ..TrainConfig::default()
    };
    assert_eq!(c.learning_rate_at(0), 0.2);
    assert_eq!(c.learning_rate_at(4), 1.0);
    assert_eq!(c.learning_rate_at(99), 1.0);
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let (mut p, corpus, _) = world();
    let before = p.store.checksum();
    let r = train_phase1(&quick(1, 0), &corpus.texts("en", Split::Train), &mut p, None).unwrap();
    assert!(r.records.is_empty());
    assert_eq!(p.store.checksum(), before);
    assert!(p.phases_completed.is_empty());
}

#[test]
fn phase1_is_deterministic_and_learns() {
    let (p0, corpus, _) = world();
    let texts = corpus.texts("en", Split::Train);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..quick(1, 30)
    };
    let (mut a, mut b) = (p0.clone(), p0.clone());
    let ra = train_phase1(&cfg, &texts, &mut a, None).unwrap();
    let rb = train_phase1(&cfg, &texts, &mut b, None).unwrap();
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    assert_eq!(a.store.checksum(), b.store.checksum());
    assert_eq!(ra.records.len(), 30);
    assert!(ra.mean_loss(25..30).unwrap() < ra.mean_loss(0..5).unwrap());
    assert!(a.phases_completed.contains(&1));
    // Only the concept model moves in phase 1.
    assert_eq!(
        a.store.checksum_where(|n| !n.starts_with("concept.")),
        p0.store.checksum_where(|n| !n.starts_with("concept."))
    );
    let load: usize = ra.expert_load[0].iter().sum();
    assert!(load > 0);
}

#[test]
fn phase2_freezes_the_concept_model_and_composes_losses() {
    let (mut p, corpus, _) = world();
    let concept_before = p.store.checksum_where(|n| n.starts_with("concept."));
    let codec_before = p.store.checksum_where(|n| !n.starts_with("concept."));
    let cfg = TrainConfig {
        lambda_align: 0.7,
        lambda_translate: 1.3,
        ..quick(2, 5)
    };
    let r = train_phase2(&cfg, &corpus, &mut p, None).unwrap();
    assert_eq!(p.store.checksum_where(|n| n.starts_with("concept.")), concept_before);
    assert_ne!(p.store.checksum_where(|n| !n.starts_with("concept.")), codec_before);
    for rec in &r.records {
        let sum: f64 = r.weights.iter().map(|(k, w)| w * rec.components[k]).sum();
        assert!((rec.total - sum).abs() < 1e-12);
        assert!(rec.total.is_finite());
    }
    // Frozen flags are cleared after training.
    assert!(p.store.ids().all(|id| !p.store.is_frozen(id)));
}

#[test]
fn phase2_never_touches_the_concept_embedding() {
    let (mut p, corpus, _) = world();
    let cfg = TrainConfig {
        freeze: FreezeFlags::default(),
        ..quick(2, 3)
    };
    let emb = |p: &SutraPipeline| p.store.checksum_where(|n| n == "concept.tok_emb");
    let layers = |p: &SutraPipeline| p.store.checksum_where(|n| n.starts_with("concept.layers"));
    let (e0, l0) = (emb(&p), layers(&p));
    train_phase2(&cfg, &corpus, &mut p, None).unwrap();
    assert_eq!(emb(&p), e0);
    assert_ne!(layers(&p), l0);
}

#[test]
fn zero_loss_weights_change_nothing() {
    let (mut p, corpus, _) = world();
    let before = p.store.checksum();
    let cfg = TrainConfig {
        lambda_align: 0.0,
        lambda_translate: 0.0,
        ..quick(2, 3)
    };
    train_phase2(&cfg, &corpus, &mut p, None).unwrap();
    assert_eq!(p.store.checksum(), before);
}

#[test]
fn phase2_needs_two_languages() {
    let (mut p, corpus, _) = world();
    let one = corpus.with_langs(&["en"]);
    assert!(matches!(train_phase2(&quick(2, 1), &one, &mut p, None), Err(Error::Config(_))));
    let mono = TrainConfig {
        monolingual: true,
        ..quick(2, 1)
    };
    assert!(train_phase2(&mono, &one, &mut p, None).is_ok());
}

#[test]
fn phase3_requires_earlier_phases_and_respects_freezing() {
    let (mut p, _, qa) = world();
    assert!(matches!(train_phase3(&quick(3, 1), &qa, &mut p, None), Err(Error::State(_))));
    p.phases_completed.extend([1, 2]);
    let before = p.store.checksum();
    let frozen = TrainConfig {
        freeze: FreezeFlags::all(),
        ..quick(3, 2)
    };
    let r = train_phase3(&frozen, &qa, &mut p, None).unwrap();
    assert_eq!(p.store.checksum(), before);
    assert_eq!(r.records.len(), 2);
    train_phase3(&quick(3, 2), &qa, &mut p, None).unwrap();
    assert_ne!(p.store.checksum(), before);
}

#[test]
fn wrong_phase_config_is_rejected() {
    let (mut p, corpus, _) = world();
    assert!(matches!(train_phase2(&quick(1, 1), &corpus, &mut p, None), Err(Error::Config(_))));
}

#[test]
fn non_finite_weights_abort_with_diagnostics() {
    let (mut p, corpus, _) = world();
    let id = p.store.id("concept.layers.0.attn.wq").unwrap();
    p.store.value_mut(id).data_mut()[0] = f64::NAN;
    let err = train_phase1(&quick(1, 3), &corpus.texts("en", Split::Train), &mut p, None).unwrap_err();
    match err {
        Error::TrainingAborted { step, reason, .. } => {
            assert_eq!(step, 0);
            assert!(!reason.is_empty());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoints_follow_the_cadence() {
    let (mut p, corpus, _) = world();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..quick(1, 5)
    };
    let r = train_phase1(&cfg, &corpus.texts("en", Split::Train), &mut p, Some(dir.path())).unwrap();
    assert_eq!(r.final_checkpoint.as_deref(), Some("final.ckpt"));
    for f in ["step_000002.ckpt", "step_000004.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = crate::model::load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(back.store.checksum(), r.param_checksum);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn alignment_loss_is_bounded_and_matches_oracle(
        n in 2usize..6,
        d in 2usize..6,
        seed in 0u64..1000,
        margin in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[n, d], 1.0, &mut rng);
        let b = Tensor::randn(&[n, d], 1.0, &mut rng);
        let (c, total, contrast) = eval_alignment(&a, &b, margin, 1.0);
        prop_assert!((0.0..=2.0).contains(&c));
        prop_assert!(contrast.unwrap() >= 0.0);
        let (oc, ot) = alignment_oracle(&rows(&a), &rows(&b), margin, 1.0);
        prop_assert!((c - oc).abs() < 1e-10 && (total - ot).abs() < 1e-10);
    }
}

