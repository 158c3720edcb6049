use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::losses::{alignment_loss, translation_loss_from_encoding, TranslationExample};
use super::{StepRecord, TrainConfig, TrainReport};
use crate::corpus::{ParallelCorpus, QaItem, Split};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Packed, SutraPipeline};
use crate::numerics::{Adam, AdamConfig, Graph, Tensor, Var};

/// SHA-256 over newline-terminated records.
pub fn data_fingerprint<S: AsRef<str>>(records: impl IntoIterator<Item = S>) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Walks a dataset in seeded shuffled epochs.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn batch(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Training items grouped by meaning key with one field masked; the
/// leading template field is never masked.
struct Neighbours {
    groups: Vec<Vec<usize>>,
    of: Vec<Vec<usize>>,
}

impl Neighbours {
    fn new<'a>(keys: impl IntoIterator<Item = &'a str>) -> Self {
        let mut by_key: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut n = 0;
        for (i, key) in keys.into_iter().enumerate() {
            n += 1;
            let fields: Vec<&str> = key.split('/').collect();
            for j in 1..fields.len() {
                let mut masked = fields.clone();
                masked[j] = "*";
                by_key.entry(masked.join("/")).or_default().push(i);
            }
        }
        let groups: Vec<Vec<usize>> = by_key.into_values().filter(|g| g.len() > 1).collect();
        let mut of = vec![Vec::new(); n];
        for (gi, g) in groups.iter().enumerate() {
            for &i in g {
                of[i].push(gi);
            }
        }
        Self { groups, of }
    }

    /// Replaces the last `fraction` of `items` with neighbours of the
    /// first part, skipping candidates already in the batch.
    fn mix_into(&self, items: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = items.to_vec();
        let n_hard = ((fraction * items.len() as f64).round() as usize).min(items.len() / 2);
        let anchors = items.len() - n_hard;
        for k in 0..n_hard {
            let anchor = out[k % anchors];
            let groups = &self.of[anchor];
            if groups.is_empty() {
                continue;
            }
            let g = &self.groups[groups[rng.random_range(0..groups.len())]];
            let fresh: Vec<usize> = g.iter().copied().filter(|c| !out.contains(c)).collect();
            if !fresh.is_empty() {
                out[anchors + k] = fresh[rng.random_range(0..fresh.len())];
            }
        }
        out
    }
}

fn batch_id(items: &[usize]) -> u64 {
    let mut h = Sha256::new();
    for &i in items {
        h.update((i as u64).to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// What one step's forward pass produced.
struct StepGraph {
    total: Var,
    components: BTreeMap<String, Var>,
    diagnostics: BTreeMap<String, Var>,
    expert_load: Vec<Vec<usize>>,
    warning: Option<String>,
}

fn abort(step: usize, batch: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(reason) => Error::TrainingAborted { step, batch, reason },
        other => other,
    }
}

/// Shared optimization loop; `forward` builds the loss for a batch of
/// dataset indices.
fn run_loop(
    cfg: &TrainConfig,
    p: &mut SutraPipeline,
    n_items: usize,
    fingerprint: String,
    weights: BTreeMap<String, f64>,
    ckpt_dir: Option<&Path>,
    mut forward: impl FnMut(&mut Graph, &SutraPipeline, &[usize], &mut ChaCha8Rng) -> Result<StepGraph>,
) -> Result<TrainReport> {
    let start = Instant::now();
    for (prefix, frozen) in cfg.freeze.prefixes() {
        p.store.set_frozen_prefix(prefix, frozen);
    }
    let result = optimize(cfg, p, n_items, &mut forward, ckpt_dir);
    for (prefix, _) in cfg.freeze.prefixes() {
        p.store.set_frozen_prefix(prefix, false);
    }
    let (records, expert_load, warnings) = result?;
    if cfg.steps > 0 {
        p.phases_completed.insert(cfg.phase);
    }
    let final_checkpoint = match ckpt_dir {
        Some(dir) => {
            save_checkpoint(p, &dir.join("final.ckpt"))?;
            Some("final.ckpt".to_string())
        }
        None => None,
    };
    Ok(TrainReport {
        phase: cfg.phase,
        seed: cfg.seed,
        config: cfg.clone(),
        weights,
        records,
        data_fingerprint: fingerprint,
        final_checkpoint,
        param_checksum: p.store.checksum(),
        expert_load,
        warnings,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

type LoopOutput = (Vec<StepRecord>, Vec<Vec<usize>>, Vec<String>);

fn optimize(
    cfg: &TrainConfig,
    p: &mut SutraPipeline,
    n_items: usize,
    forward: &mut impl FnMut(&mut Graph, &SutraPipeline, &[usize], &mut ChaCha8Rng) -> Result<StepGraph>,
    ckpt_dir: Option<&Path>,
) -> Result<LoopOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(n_items);
    let mut adam = Adam::new(&p.store, AdamConfig::default());
    let mut records = Vec::with_capacity(cfg.steps);
    let mut load: Vec<Vec<usize>> = Vec::new();
    let mut warnings = Vec::new();
    for step in 0..cfg.steps {
        let items = sampler.batch(cfg.batch_size, &mut rng);
        let bid = batch_id(&items);
        let mut g = Graph::new();
        let out = forward(&mut g, p, &items, &mut rng).map_err(|e| abort(step, bid, e))?;
        let total = g.value(out.total).item();
        let mut components = BTreeMap::new();
        for (k, &v) in out.components.iter().chain(&out.diagnostics) {
            components.insert(k.clone(), g.value(v).item());
        }
        if let Some((k, v)) = std::iter::once(("total", total))
            .chain(components.iter().map(|(k, v)| (k.as_str(), *v)))
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::TrainingAborted {
                step,
                batch: bid,
                reason: format!("{k} loss is {v} on items {items:?}"),
            });
        }
        components.retain(|k, _| out.components.contains_key(k));
        if let Some(w) = out.warning {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        if load.is_empty() {
            load = out.expert_load.iter().map(|l| vec![0; l.len()]).collect();
        }
        for (acc, l) in load.iter_mut().zip(&out.expert_load) {
            acc.iter_mut().zip(l).for_each(|(a, b)| *a += b);
        }

        g.backward(out.total).map_err(|e| abort(step, bid, e))?;
        p.store.zero_grad();
        p.store.accumulate_grads(&g);
        drop(g);
        let grad_norm = p.store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                batch: bid,
                reason: format!("gradient norm is {grad_norm}"),
            });
        }
        if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            p.store.scale_grads(cfg.clip_norm / grad_norm);
        }
        let lr = cfg.learning_rate_at(step);
        adam.step(&mut p.store, lr).map_err(|e| abort(step, bid, e))?;
        records.push(StepRecord {
            step,
            learning_rate: lr,
            total,
            components,
            grad_norm,
        });
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                save_checkpoint(p, &dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    p.store.zero_grad();
    Ok((records, load, warnings))
}

fn check_phase(cfg: &TrainConfig, phase: u8) -> Result<()> {
    cfg.validate()?;
    if cfg.phase != phase {
        return Err(Error::Config(format!(
            "config is for phase {}, called phase {phase}",
            cfg.phase
        )));
    }
    Ok(())
}

/// Phase 1: next-token prediction on pivot sentences, each trained as
/// `[BOS] + sentence` predicting `sentence + [EOS]`.
pub fn train_phase1(
    cfg: &TrainConfig,
    sentences: &[String],
    p: &mut SutraPipeline,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport> {
    check_phase(cfg, 1)?;
    if sentences.is_empty() && cfg.steps > 0 {
        return Err(Error::Data("phase 1 corpus is empty".into()));
    }
    let data: Vec<(Vec<u32>, Vec<u32>)> = sentences.iter().map(|s| p.target_ids(s)).collect();
    if let Some((i, _)) = data.iter().enumerate().find(|(_, (x, _))| x.len() > p.config.context_window) {
        return Err(Error::Context {
            len: data[i].0.len(),
            window: p.config.context_window,
        });
    }
    let weights = BTreeMap::from([("lm".to_string(), 1.0)]);
    let fingerprint = data_fingerprint(sentences);
    run_loop(cfg, p, data.len(), fingerprint, weights, ckpt_dir, |g, p, items, _| {
        let inputs: Vec<Vec<u32>> = items.iter().map(|&i| data[i].0.clone()).collect();
        let labels: Vec<usize> = items
            .iter()
            .flat_map(|&i| data[i].1.iter().map(|&t| t as usize))
            .collect();
        let out = p.lm_forward(g, &inputs)?;
        let lm = g.cross_entropy(out.logits, &labels)?;
        Ok(StepGraph {
            total: lm,
            components: BTreeMap::from([("lm".to_string(), lm)]),
            diagnostics: BTreeMap::new(),
            expert_load: out.expert_load,
            warning: None,
        })
    })
}

/// Language indices a codec phase trains on, in pipeline order.
fn active_languages(cfg: &TrainConfig, p: &SutraPipeline, available: &[String]) -> Result<Vec<usize>> {
    for l in available {
        p.lang_index(l)?;
    }
    let langs: Vec<usize> = if cfg.monolingual {
        let pivot = &p.langs[0];
        if !available.contains(pivot) {
            return Err(Error::Config(format!("pivot language {pivot} missing from corpus")));
        }
        vec![0]
    } else {
        (0..p.langs.len()).filter(|&i| available.contains(&p.langs[i])).collect()
    };
    Ok(langs)
}

/// Translation loss for `pairs` of `(source text, source lang, target
/// text, target lang)`, plus alignment between the pooled encoding of each
/// source and of its partner sentence.
fn codec_step(
    g: &mut Graph,
    p: &SutraPipeline,
    cfg: &TrainConfig,
    pairs: &[(&str, usize, &str, usize)],
    partners: &[(&str, usize)],
) -> Result<StepGraph> {
    let examples: Vec<TranslationExample> = pairs
        .iter()
        .map(|&(s, sl, t, tl)| TranslationExample::new(p, s, sl, t, tl))
        .collect();
    let partner_ids: Vec<Vec<u32>> = partners.iter().map(|&(t, _)| p.source_ids(t)).collect();
    let mut seqs: Vec<(&[u32], usize)> = examples.iter().map(|e| (e.source.as_slice(), e.source_lang)).collect();
    seqs.extend(partner_ids.iter().zip(partners).map(|(ids, &(_, l))| (ids.as_slice(), l)));
    let (enc, packed) = p.encode(g, &seqs)?;

    let n = pairs.len();
    let src_packed = Packed::new(packed.lengths[..n].to_vec());
    let src_enc = g.gather_rows(enc, &(0..src_packed.rows()).collect::<Vec<_>>())?;
    let translate = translation_loss_from_encoding(g, p, &examples, src_enc, &src_packed)?;

    let pooled = g.segment_mean(enc, &packed.segments())?;
    let pooled = center_rows(g, pooled)?;
    let a = g.gather_rows(pooled, &(0..n).collect::<Vec<_>>())?;
    let b = g.gather_rows(pooled, &(n..2 * n).collect::<Vec<_>>())?;
    let align = alignment_loss(g, a, b, cfg.margin, cfg.lambda_contrast)?;

    let wt = g.scale(translate, cfg.lambda_translate);
    let wa = g.scale(align.total, cfg.lambda_align);
    let total = g.add(wt, wa)?;
    let mut diagnostics = BTreeMap::from([("align_cosine".to_string(), align.cosine)]);
    if let Some(c) = align.contrast {
        diagnostics.insert("align_contrast".to_string(), c);
    }
    Ok(StepGraph {
        total,
        components: BTreeMap::from([("translate".to_string(), translate), ("align".to_string(), align.total)]),
        diagnostics,
        warning: align
            .contrast
            .is_none()
            .then(|| "batch of one: contrastive alignment term disabled".to_string()),
        expert_load: Vec::new(),
    })
}

/// Subtracts the mean row from every row.
fn center_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let w = g.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
    let mean = g.matmul(w, x)?;
    let spread = g.gather_rows(mean, &vec![0; rows])?;
    g.sub(x, spread)
}

fn codec_weights(cfg: &TrainConfig) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("align".to_string(), cfg.lambda_align),
        ("translate".to_string(), cfg.lambda_translate),
    ])
}

/// Picks an ordered pair of distinct languages, or the single language
/// twice when only one is active.
fn language_pair(langs: &[usize], rng: &mut ChaCha8Rng) -> (usize, usize) {
    if langs.len() == 1 {
        return (langs[0], langs[0]);
    }
    let i = rng.random_range(0..langs.len());
    let mut j = rng.random_range(0..langs.len() - 1);
    if j >= i {
        j += 1;
    }
    (langs[i], langs[j])
}

/// Phase 2: trains encoder and decoder to translate between every pair of
/// corpus languages through the concept model, while pulling the pooled
/// encodings of parallel sentences together.
pub fn train_phase2(
    cfg: &TrainConfig,
    corpus: &ParallelCorpus,
    p: &mut SutraPipeline,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport> {
    check_phase(cfg, 2)?;
    let langs = active_languages(cfg, p, &corpus.langs)?;
    if langs.len() < 2 && !cfg.monolingual {
        return Err(Error::Config(format!(
            "phase 2 needs at least two languages shared with the pipeline, corpus has {:?}",
            corpus.langs
        )));
    }
    let train: Vec<_> = corpus.split(Split::Train).collect();
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Data("parallel corpus has no training items".into()));
    }
    let names: Vec<String> = p.langs.clone();
    let fingerprint = data_fingerprint(train.iter().flat_map(|it| {
        langs
            .iter()
            .map(|&l| format!("{}\t{}\t{}", it.meaning_key, names[l], it.texts[&names[l]]))
            .collect::<Vec<_>>()
    }));
    let config = cfg.clone();
    let neighbours = Neighbours::new(train.iter().map(|it| it.meaning_key.as_str()));
    run_loop(cfg, p, train.len(), fingerprint, codec_weights(cfg), ckpt_dir, |g, p, items, rng| {
        let items = if config.hard_negatives > 0.0 {
            neighbours.mix_into(items, config.hard_negatives, rng)
        } else {
            items.to_vec()
        };
        let pairs: Vec<(&str, usize, &str, usize)> = items
            .iter()
            .map(|&i| {
                let (s, t) = language_pair(&langs, rng);
                let texts = &train[i].texts;
                (texts[&names[s]].as_str(), s, texts[&names[t]].as_str(), t)
            })
            .collect();
        let partners: Vec<(&str, usize)> = pairs.iter().map(|&(_, _, t, tl)| (t, tl)).collect();
        codec_step(g, p, &config, &pairs, &partners)
    })
}

/// Phase 3: end-to-end fine-tuning on question answering. The source is the
/// question with its options, the target the correct option, both in the
/// same language. Alignment between two languages' prompts of the same item
/// keeps the concept space shared.
pub fn train_phase3(
    cfg: &TrainConfig,
    items: &[QaItem],
    p: &mut SutraPipeline,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport> {
    check_phase(cfg, 3)?;
    for needed in [1u8, 2] {
        if !p.phases_completed.contains(&needed) {
            return Err(Error::State(format!(
                "phase 3 needs a pipeline that completed phase {needed}; completed {:?}",
                p.phases_completed
            )));
        }
    }
    let item_langs: Vec<String> = match items.first() {
        Some(it) => it.langs().map(str::to_string).collect(),
        None if cfg.steps == 0 => p.langs.clone(),
        None => return Err(Error::Data("QA corpus is empty".into())),
    };
    for it in items {
        if !it.langs().eq(item_langs.iter().map(String::as_str)) {
            return Err(Error::Data(format!(
                "QA item {} has languages {:?}, expected {item_langs:?}",
                it.meaning_key,
                it.langs().collect::<Vec<_>>()
            )));
        }
    }
    let langs = active_languages(cfg, p, &item_langs)?;
    if langs.is_empty() {
        return Err(Error::Config("no QA language is known to the pipeline".into()));
    }
    let names = p.langs.clone();
    let prompts: Vec<Vec<String>> = items
        .iter()
        .map(|it| names.iter().map(|l| it.prompt(l).unwrap_or_default()).collect())
        .collect();
    let answers: Vec<Vec<String>> = items
        .iter()
        .map(|it| names.iter().map(|l| it.answer_text(l).unwrap_or_default().to_string()).collect())
        .collect();
    let fingerprint = data_fingerprint(items.iter().flat_map(|it| {
        langs
            .iter()
            .map(|&l| format!("{}\t{}\t{}\t{}", it.meaning_key, names[l], it.prompt(&names[l]).unwrap_or_default(), it.answer))
            .collect::<Vec<_>>()
    }));
    let config = cfg.clone();
    run_loop(cfg, p, items.len(), fingerprint, codec_weights(cfg), ckpt_dir, |g, p, batch, rng| {
        let mut pairs = Vec::with_capacity(batch.len());
        let mut partners = Vec::with_capacity(batch.len());
        for &i in batch {
            let (l, other) = language_pair(&langs, rng);
            pairs.push((prompts[i][l].as_str(), l, answers[i][l].as_str(), l));
            partners.push((prompts[i][other].as_str(), other));
        }
        codec_step(g, p, &config, &pairs, &partners)
    })
}
