//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! `SUTRA_ACCEPT=1,5,10` runs a subset.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sutra::cli;
use sutra::corpus::Split;
use sutra::eval::{alignment_report, consistency_eval, fertility_eval, perplexity};
use sutra::model::{count_params, Attention, ModelConfig, Packed, SutraPipeline};
use sutra::moe::{top_k_gate, ExpertMixtureLayer, MoeConfig};
use sutra::numerics::check::{check_gradients, check_param_gradients};
use sutra::numerics::{Graph, Initializer, ParamStore, RotaryTable, Tensor};
use sutra::recipes::{self, DeskWorld};
use sutra::tokenizer::TokenizerModel;
use sutra::training::{alignment_loss, train_phase1, translation_loss, TranslationExample};

type Outcome = Result<(bool, String), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn moe_layer(seed: u64, d: usize, ffn: usize, n: usize, k: usize) -> (ParamStore, ExpertMixtureLayer) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = MoeConfig {
        d_model: d,
        ffn_dim: ffn,
        n_experts: n,
        top_k: k,
    };
    let l = ExpertMixtureLayer::new(&mut Initializer::new(&mut store, &mut r), "moe", cfg).unwrap();
    (store, l)
}

/// Repeated argmax, lower index on ties.
fn argmax_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; logits.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in logits.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| v > logits[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn c1_gating() -> Outcome {
    let mut r = rng(1);
    let mut worst_sum = 0.0f64;
    let mut layers = Vec::new();
    for n in [2, 4, 8] {
        for k in 1..=n {
            layers.push((n, k, moe_layer(100 + (n * 10 + k) as u64, 8, 8, n, k)));
        }
    }
    for t in 0..10_000 {
        let (n, k, (store, layer)) = &layers[r.random_range(0..layers.len())];
        let x: Vec<f64> = (0..8)
            .map(|_| {
                let v: f64 = r.random_range(-2.0..2.0);
                // Coarse values make exact ties common.
                if t % 3 == 0 { (v * 2.0).round() / 2.0 } else { v }
            })
            .collect();
        let gates = if t % 2 == 0 {
            layer.gate(store, &x).map_err(|e| e.to_string())?
        } else {
            let logits: Vec<f64> = x.iter().take(*n).map(|v| v * 3.0).collect();
            top_k_gate(&logits, *k).map_err(|e| e.to_string())?
        };
        let nz = gates.weights.iter().filter(|w| **w != 0.0).count();
        let sum: f64 = gates.weights.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        let want = argmax_k(&gates.logits, *k);
        if nz != *k || (sum - 1.0).abs() > 1e-6 || gates.selected != want {
            return Ok((false, format!("token {t}: n={n} K={k} nonzeros {nz} sum {sum} selected {:?} want {want:?}", gates.selected)));
        }
    }
    Ok((true, format!("10000 tokens, max |sum-1| {worst_sum:.1e}")))
}

fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += xi * w[i * cols + c];
        }
    }
    out
}

fn c2_dense_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..40u64 {
        let n = [1, 2, 3, 4, 8][seed as usize % 5];
        let (d, ffn) = (4 + seed as usize % 5, 3 + seed as usize % 6);
        let (store, l) = moe_layer(seed, d, ffn, n, n);
        let x = Tensor::randn(&[5, d], 1.0, &mut rng(seed + 1000));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = l.forward(&mut g, &store, xv).map_err(|e| e.to_string())?;
        let got = g.value(out.out).data().to_vec();
        for t in 0..5 {
            let xt = x.row(t);
            let logits = matvec(xt, store.value(l.gate_weights).data(), n);
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let mut y = vec![0.0; d];
            for (i, e) in l.experts.iter().enumerate() {
                let a = matvec(xt, store.value(e.w_gate).data(), ffn);
                let b = matvec(xt, store.value(e.w_up).data(), ffn);
                let h: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
                let w = logits[i].exp() / z;
                for (yk, ek) in y.iter_mut().zip(matvec(&h, store.value(e.w_down).data(), d)) {
                    *yk += w * ek;
                }
            }
            for k in 0..d {
                worst = worst.max((got[t * d + k] - y[k]).abs());
            }
        }
    }
    Ok((worst <= 1e-9, format!("40 layers, max abs diff {worst:.2e}")))
}

fn tiny_pipeline() -> SutraPipeline {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 8,
        n_experts: 4,
        top_k: 2,
        context_window: 32,
        vocab_size: TokenizerModel::bytes_only().vocab_size(),
        enc_layers: 1,
        dec_layers: 1,
        enc_heads: 2,
        dec_heads: 2,
        moe_every_k_layers: 1,
        n_languages: 2,
        seed: 3,
    };
    SutraPipeline::new(cfg, TokenizerModel::bytes_only(), vec!["en".into(), "xx".into()]).unwrap()
}

/// Freezes everything except parameters under `prefix`; token embeddings
/// stay frozen since most of their rows are unused.
fn only(p: &mut SutraPipeline, prefix: &str) {
    for id in p.store.ids().collect::<Vec<_>>() {
        let name = p.store.name(id).to_string();
        p.store.set_frozen(id, !name.starts_with(prefix) || name.ends_with("tok_emb"));
    }
}

fn c3_gradients() -> Outcome {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, rep: sutra::numerics::check::GradCheck| {
        ok &= rep.passes(TOL) && rep.checked > 0;
        lines.push(format!("{name} {:.1e}/{}", rep.max_rel_err, rep.checked));
    };
    let e = |e: sutra::Error| e.to_string();

    // Mixture layer: parameters and input.
    let (mut store, l) = moe_layer(7, 8, 8, 4, 2);
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng(8));
    let w = Tensor::randn(&[5, 8], 1.0, &mut rng(9));
    let rep = check_param_gradients(&mut store, H, 1, |g, st| {
        let xv = g.constant(x.clone());
        let out = l.forward(g, st, xv)?;
        let wv = g.constant(w.clone());
        let prod = g.mul(out.out, wv)?;
        Ok(g.sum(prod))
    })
    .map_err(e)?;
    record("moe", rep);

    // Attention block: rotary self-attention followed by cross-attention.
    let mut store = ParamStore::new();
    let mut r = rng(10);
    let (sa, ca) = {
        let mut init = Initializer::new(&mut store, &mut r);
        (Attention::new(&mut init, "self", 8, 2), Attention::new(&mut init, "cross", 8, 2))
    };
    let rope = std::sync::Arc::new(RotaryTable::new(4, 16, 10_000.0));
    let packed = Packed::new(vec![4, 3]);
    let mem_packed = Packed::new(vec![2, 3]);
    let x = Tensor::randn(&[7, 8], 1.0, &mut rng(11));
    let mem = Tensor::randn(&[5, 8], 1.0, &mut rng(12));
    let w = Tensor::randn(&[7, 8], 1.0, &mut rng(13));
    let rep = check_param_gradients(&mut store, H, 1, |g, st| {
        let xv = g.constant(x.clone());
        let mv = g.constant(mem.clone());
        let a = sa.self_attend(g, st, xv, &packed, true, &rope)?;
        let c = ca.cross_attend(g, st, a, &packed, mv, &mem_packed)?;
        let wv = g.constant(w.clone());
        let prod = g.mul(c, wv)?;
        Ok(g.sum(prod))
    })
    .map_err(e)?;
    record("attention", rep);

    // Encoder and decoder through the full codec path.
    let base = tiny_pipeline();
    let objective = |q: &SutraPipeline, g: &mut Graph| {
        let src = q.tokenizer.encode("abca");
        let tgt = q.tokenizer.encode("bc");
        let (enc, mem) = q.encode(g, &[(&src, 0)])?;
        let c = q.concept_transform(g, enc, &mem)?;
        let (logits, _) = q.decode(g, c.hidden, &mem, &[(&tgt, 1)])?;
        let w = g.constant(Tensor::randn(g.shape(logits), 1.0, &mut rng(14)));
        let prod = g.mul(logits, w)?;
        Ok(g.sum(prod))
    };
    for (name, prefix) in [("encoder", "encoder."), ("decoder", "decoder.")] {
        let mut p = base.clone();
        only(&mut p, prefix);
        let mut store = p.store.clone();
        let rep = check_param_gradients(&mut store, H, 1, |g, st| {
            let mut q = p.clone();
            q.store = st.clone();
            objective(&q, g)
        })
        .map_err(e)?;
        record(name, rep);
    }

    // Alignment loss on raw vectors.
    let mut r = rng(15);
    let inputs = [Tensor::randn(&[4, 6], 1.0, &mut r), Tensor::randn(&[4, 6], 1.0, &mut r)];
    let rep = check_gradients(&inputs, H, |g, v| Ok(alignment_loss(g, v[0], v[1], 0.5, 1.0)?.total)).map_err(e)?;
    record("alignment", rep);

    // Translation loss over every codec and concept parameter.
    let mut p = base.clone();
    only(&mut p, "");
    let batch = vec![
        TranslationExample::new(&p, "abc d", 0, "xy z", 1),
        TranslationExample::new(&p, "zz", 1, "ab", 0),
    ];
    let mut store = p.store.clone();
    let rep = check_param_gradients(&mut store, H, 1, |g, st| {
        let mut q = p.clone();
        q.store = st.clone();
        translation_loss(g, &q, &batch)
    })
    .map_err(e)?;
    record("translation", rep);
    Ok((ok, lines.join(", ")))
}

fn c4_locality() -> Outcome {
    let mut tokens = 0;
    for seed in 0..10u64 {
        let (n, k) = [(4, 1), (4, 2), (8, 2), (8, 3), (2, 1)][seed as usize % 5];
        let (mut store, l) = moe_layer(seed, 8, 8, n, k);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng(seed + 50));
        for t in 0..6 {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![1, 8], x.row(t).to_vec()).map_err(|e| e.to_string())?);
            let out = l.forward(&mut g, &store, xv).map_err(|e| e.to_string())?;
            let loss = g.sum(out.out);
            g.backward(loss).map_err(|e| e.to_string())?;
            store.zero_grad();
            store.accumulate_grads(&g);
            let selected = &out.gates[0].selected;
            for (j, ex) in l.experts.iter().enumerate() {
                let touched = [ex.w_gate, ex.w_up, ex.w_down]
                    .iter()
                    .any(|&p| store.grad(p).iter().any(|v| *v != 0.0));
                if !selected.contains(&j) && touched {
                    return Ok((false, format!("layer {seed} token {t}: unselected expert {j} has gradient")));
                }
            }
            tokens += 1;
        }
        // Whole batch: experts no token picked stay at exactly zero.
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = l.forward(&mut g, &store, xv).map_err(|e| e.to_string())?;
        let loss = g.sum(out.out);
        g.backward(loss).map_err(|e| e.to_string())?;
        store.zero_grad();
        store.accumulate_grads(&g);
        for (j, ex) in l.experts.iter().enumerate() {
            if out.expert_load[j] == 0 && [ex.w_gate, ex.w_up, ex.w_down].iter().any(|&p| store.grad(p).iter().any(|v| *v != 0.0)) {
                return Ok((false, format!("layer {seed}: idle expert {j} has gradient in batch")));
            }
        }
    }
    Ok((true, format!("{tokens} tokens over 10 layers")))
}

fn random_string(r: &mut ChaCha8Rng) -> String {
    let len = r.random_range(0..40);
    (0..len)
        .map(|_| match r.random_range(0..6) {
            0 => r.random_range(0x20u32..0x7f),
            1 => r.random_range(0x0900..0x0980),
            2 => r.random_range(0xAC00..0xAC80),
            3 => r.random_range(0x1F300..0x1F600),
            4 => [0x20, 0x0a, 0x09, 0x3000][r.random_range(0..4)],
            _ => r.random_range(0..0x11_0000),
        })
        .filter_map(char::from_u32)
        .collect()
}

fn c5_round_trip(w: &DeskWorld) -> Outcome {
    let mut r = rng(5);
    let mut texts: Vec<String> = (0..10_000).map(|_| random_string(&mut r)).collect();
    for split in [Split::Train, Split::Valid, Split::Test] {
        for (_, t) in w.texts_by_lang(split) {
            texts.extend(t);
        }
    }
    for tok in [&w.base_tokenizer, &w.tokenizer] {
        for t in &texts {
            let back = tok.decode(&tok.encode(t)).map_err(|e| e.to_string())?;
            if &back != t {
                return Ok((false, format!("{t:?} came back as {back:?}")));
            }
        }
    }
    Ok((true, format!("{} strings, 2 tokenizers", texts.len())))
}

fn c6_fertility() -> Outcome {
    let w = DeskWorld::standard(6).map_err(|e| e.to_string())?;
    let held_out = w.texts_by_lang(Split::Test);
    let cmp = fertility_eval(("base", &w.base_tokenizer), ("merged", &w.tokenizer), &held_out);
    let mut ok = true;
    let mut parts = Vec::new();
    for row in &cmp.rows {
        let ratio = row.ratio.unwrap_or(f64::INFINITY);
        let pass = if row.lang == w.pivot() { ratio <= 1.05 } else { ratio <= 0.6 };
        ok &= pass;
        parts.push(format!("{} {:.3}", row.lang, ratio));
    }
    Ok((ok, format!("merged/base tokens: {}", parts.join(", "))))
}

fn c7_phase1() -> Outcome {
    let w = DeskWorld::build(2, 15_360, 300, 17).map_err(|e| e.to_string())?;
    let train = w.corpus.texts(w.pivot(), Split::Train);
    let valid = w.corpus.texts(w.pivot(), Split::Valid);
    let tokens: usize = train.iter().map(|s| w.tokenizer.encode(s).len()).sum();
    let mut p = w.pipeline(0).map_err(|e| e.to_string())?;
    let before = perplexity(&p, &valid).map_err(|e| e.to_string())?;
    train_phase1(&recipes::phase1_config(recipes::PHASE1_STEPS), &train, &mut p, None).map_err(|e| e.to_string())?;
    let after = perplexity(&p, &valid).map_err(|e| e.to_string())?;
    let ok = tokens >= 50_000 && after < before && after < 0.5 * before;
    Ok((ok, format!("{tokens} pivot tokens, valid ppl {before:.1} -> {after:.2}")))
}

/// Trained pipelines shared by the alignment and consistency criteria.
struct Trained {
    world: DeskWorld,
    after_phase1: SutraPipeline,
    after_phase2: SutraPipeline,
}

fn c8_alignment(w: DeskWorld) -> Result<((bool, String), Trained), String> {
    let mut p = w.pipeline(0).map_err(|e| e.to_string())?;
    let base = alignment_report(&p, &w.corpus, Split::Test).map_err(|e| e.to_string())?;
    let pivot = w.corpus.texts(w.pivot(), Split::Train);
    train_phase1(&recipes::phase1_config(recipes::WARMUP_PHASE1_STEPS), &pivot, &mut p, None).map_err(|e| e.to_string())?;
    let after_phase1 = p.clone();
    recipes::train_phase2_cycles(&w.corpus, &mut p, false).map_err(|e| e.to_string())?;
    let rep = alignment_report(&p, &w.corpus, Split::Test).map_err(|e| e.to_string())?;
    let pairs = rep.pairs.first().map(|r| r.n_pairs).unwrap_or(0);
    let ok = rep.mean_parallel_cosine >= 0.8
        && rep.mean_parallel_cosine - base.mean_parallel_cosine >= 0.5
        && rep.mean_retrieval_accuracy >= 0.9
        && pairs == 200;
    let msg = format!(
        "parallel cos {:.3} (random init {:.3}), random pairs {:.3}, retrieval {:.3} over {pairs} pairs",
        rep.mean_parallel_cosine, base.mean_parallel_cosine, rep.mean_random_pair_cosine, rep.mean_retrieval_accuracy
    );
    Ok((
        (ok, msg),
        Trained {
            world: w,
            after_phase1,
            after_phase2: p,
        },
    ))
}

fn c9_consistency(t: &Trained) -> Outcome {
    let w = &t.world;
    let (train_items, eval_items) = w.qa_sets(recipes::QA_ITEMS, recipes::QA_RENDERINGS, 11).map_err(|e| e.to_string())?;
    let langs: Vec<&str> = w.corpus.langs.iter().map(String::as_str).collect();

    let mut multi = t.after_phase2.clone();
    recipes::train_phase3_cycles(&train_items, &mut multi, false).map_err(|e| e.to_string())?;
    let m = consistency_eval(&multi, &eval_items, &langs).map_err(|e| e.to_string())?;

    let mut mono = t.after_phase1.clone();
    recipes::train_phase2_cycles(&w.corpus, &mut mono, true).map_err(|e| e.to_string())?;
    recipes::train_phase3_cycles(&train_items, &mut mono, true).map_err(|e| e.to_string())?;
    let b = consistency_eval(&mono, &eval_items, &langs).map_err(|e| e.to_string())?;

    let mono_other = langs
        .iter()
        .filter(|l| **l != w.pivot())
        .map(|l| b.accuracy[*l])
        .fold(0.0f64, f64::max);
    let ok = m.min >= 0.6 && m.gap <= 0.10 + 1e-12 && mono_other <= 0.35;
    let fmt = |acc: &std::collections::BTreeMap<String, f64>| {
        langs.iter().map(|l| format!("{l} {:.3}", acc[*l])).collect::<Vec<_>>().join(" ")
    };
    Ok((
        ok,
        format!(
            "{} items; sutra {} (gap {:.3}); monolingual {}",
            eval_items.len(),
            fmt(&m.accuracy),
            m.gap,
            fmt(&b.accuracy)
        ),
    ))
}

fn c10_params() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["desk", "paper"] {
        let cfg = ModelConfig::named(name).map_err(|e| e.to_string())?;
        let shapes = cfg.param_shapes().map_err(|e| e.to_string())?;
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let mut inactive = 0;
        for (n, s) in &shapes {
            if let Some(rest) = n.split(".experts.").nth(1) {
                let j: usize = rest.split('.').next().unwrap().parse().unwrap();
                if j >= cfg.top_k {
                    inactive += s.iter().product::<usize>();
                }
            }
        }
        let rep = count_params(&cfg);
        let matches = rep.total.total == total && rep.total.active == total - inactive;
        let sparse = cfg.top_k >= cfg.n_experts || rep.total.active < rep.total.total;
        ok &= matches && sparse;
        parts.push(format!("{name} total {} active {}", rep.total.total, rep.total.active));
    }
    let quiet = std::env::var_os("SUTRA_QUIET").is_some();
    if !quiet {
        std::env::set_var("SUTRA_QUIET", "1");
    }
    ok &= cli::run(["params", "--config", "desk"]) == 0 && cli::run(["params", "--config", "paper"]) == 0;
    Ok((ok, parts.join("; ")))
}

fn c11_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = |p: &Path| p.display().to_string();
    let corpus = root.path().join("corpus");
    let code = cli::run(["corpus", "generate", "--langs", "3", "--statements", "600", "--seed", "7", "--out", &s(&corpus)]);
    if code != 0 {
        return Err(format!("corpus generate exited {code}"));
    }
    let tok = root.path().join("tok");
    if cli::run(["tokenizer", "train", "--corpus", &s(&corpus), "--vocab-size", "400", "--out", &s(&tok)]) != 0 {
        return Err("tokenizer train failed".into());
    }
    let mc = root.path().join("model.json");
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        ffn_dim: 16,
        enc_layers: 1,
        dec_layers: 1,
        ..ModelConfig::desk()
    };
    std::fs::write(&mc, serde_json::to_string(&cfg).unwrap()).map_err(|e| e.to_string())?;
    let tokf = tok.join("tokenizer.json");
    let run_all = |dir: &Path| -> Result<(), String> {
        let (p1, p2, p3) = (dir.join("p1"), dir.join("p2"), dir.join("p3"));
        let steps: [(&str, Vec<String>); 7] = [
            ("p1", vec!["train".into(), "--phase".into(), "1".into(), "--corpus".into(), s(&corpus), "--tokenizer".into(), s(&tokf), "--model-config".into(), s(&mc), "--steps".into(), "6".into(), "--batch-size".into(), "4".into(), "--out".into(), s(&p1)]),
            ("p2", vec!["train".into(), "--phase".into(), "2".into(), "--corpus".into(), s(&corpus), "--model".into(), s(&p1.join("final.ckpt")), "--steps".into(), "4".into(), "--batch-size".into(), "4".into(), "--out".into(), s(&p2)]),
            ("p3", vec!["train".into(), "--phase".into(), "3".into(), "--corpus".into(), s(&corpus), "--model".into(), s(&p2.join("final.ckpt")), "--steps".into(), "4".into(), "--batch-size".into(), "2".into(), "--out".into(), s(&p3)]),
            ("ppl", vec!["eval".into(), "perplexity".into(), "--model".into(), s(&p3.join("final.ckpt")), "--corpus".into(), s(&corpus), "--out".into(), s(&dir.join("ppl"))]),
            ("align", vec!["eval".into(), "alignment".into(), "--model".into(), s(&p3.join("final.ckpt")), "--corpus".into(), s(&corpus), "--out".into(), s(&dir.join("align"))]),
            ("cons", vec!["eval".into(), "consistency".into(), "--model".into(), s(&p3.join("final.ckpt")), "--qa".into(), s(&corpus.join("qa.jsonl")), "--out".into(), s(&dir.join("cons"))]),
            ("fert", vec!["eval".into(), "fertility".into(), "--base".into(), s(&tokf), "--other".into(), s(&tokf), "--corpus".into(), s(&corpus), "--out".into(), s(&dir.join("fert"))]),
        ];
        for (name, argv) in steps {
            let code = cli::run(argv);
            if code != 0 {
                return Err(format!("{name} exited {code}"));
            }
        }
        Ok(())
    };
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run_all(&a)?;
    run_all(&b)?;
    let files = [
        "p1/report.json", "p1/final.ckpt", "p2/report.json", "p2/final.ckpt", "p3/report.json", "p3/final.ckpt",
        "ppl/perplexity.json", "align/alignment.json", "cons/consistency.json", "fert/fertility.json",
    ];
    for f in files {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            (Ok(_), Ok(_)) => return Ok((false, format!("{f} differs between runs"))),
            _ => return Err(format!("{f} missing")),
        }
    }
    Ok((true, format!("{} artifacts bit-identical across two runs", files.len())))
}

struct Runner {
    only: Option<Vec<usize>>,
    failed: usize,
}

impl Runner {
    fn wanted(&self, n: usize) -> bool {
        self.only.as_ref().is_none_or(|v| v.contains(&n))
    }

    fn report(&mut self, n: usize, name: &str, limit_s: f64, secs: f64, outcome: Outcome) {
        let (pass, detail) = match outcome {
            Ok((ok, d)) => (ok && secs < limit_s, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failed += 1;
        }
        println!(
            "criterion {n:>2} {:<20} {}  {detail}  [{secs:.1}s / {limit_s:.0}s]",
            name,
            if pass { "PASS" } else { "FAIL" }
        );
    }

    fn time<T>(f: impl FnOnce() -> T) -> (T, f64) {
        let t = Instant::now();
        let out = f();
        (out, t.elapsed().as_secs_f64())
    }
}

fn main() {
    // `cargo test` passes harness flags; only `--list` needs an answer.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    std::env::set_var("SUTRA_QUIET", "1");
    let only = std::env::var("SUTRA_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut r = Runner { only, failed: 0 };

    if r.wanted(1) {
        let (o, t) = Runner::time(c1_gating);
        r.report(1, "gating", 5.0, t, o);
    }
    if r.wanted(2) {
        let (o, t) = Runner::time(c2_dense_equivalence);
        r.report(2, "dense-equivalence", 5.0, t, o);
    }
    if r.wanted(3) {
        let (o, t) = Runner::time(c3_gradients);
        r.report(3, "gradient-check", 60.0, t, o);
    }
    if r.wanted(4) {
        let (o, t) = Runner::time(c4_locality);
        r.report(4, "gradient-locality", 5.0, t, o);
    }
    let world = if r.wanted(5) || r.wanted(8) || r.wanted(9) {
        Some(DeskWorld::standard(recipes::WORLD_SEED).expect("desk world"))
    } else {
        None
    };
    if r.wanted(5) {
        let (o, t) = Runner::time(|| c5_round_trip(world.as_ref().unwrap()));
        r.report(5, "tokenizer-roundtrip", 10.0, t, o);
    }
    if r.wanted(6) {
        let (o, t) = Runner::time(c6_fertility);
        r.report(6, "fertility", 30.0, t, o);
    }
    if r.wanted(7) {
        let (o, t) = Runner::time(c7_phase1);
        r.report(7, "phase1-learning", 300.0, t, o);
    }
    if r.wanted(8) || r.wanted(9) {
        let (res, t8) = Runner::time(|| c8_alignment(world.unwrap()));
        match res {
            Ok((o, trained)) => {
                if r.wanted(8) {
                    r.report(8, "alignment", 900.0, t8, Ok(o));
                }
                if r.wanted(9) {
                    let (o, t9) = Runner::time(|| c9_consistency(&trained));
                    r.report(9, "consistency", 1200.0, t9, o);
                }
            }
            Err(e) => {
                r.report(8, "alignment", 900.0, t8, Err(e.clone()));
                r.report(9, "consistency", 1200.0, 0.0, Err(format!("no phase-2 model: {e}")));
            }
        }
    }
    if r.wanted(10) {
        let (o, t) = Runner::time(c10_params);
        r.report(10, "param-accounting", 1.0, t, o);
    }
    if r.wanted(11) {
        let (o, t) = Runner::time(c11_determinism);
        r.report(11, "determinism", f64::INFINITY, t, o);
    }
    if r.failed > 0 {
        println!("{} criteria failed", r.failed);
        std::process::exit(1);
    }
}
