//! Measurements: perplexity, cross-lingual alignment, per-language QA
//! consistency and tokenizer fertility comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, QaItem, Split, N_OPTIONS};
use crate::error::{Error, Result};
use crate::model::SutraPipeline;
use crate::numerics::kernels::dot;
use crate::numerics::Graph;
use crate::tokenizer::{fertility, TokenizerModel};

/// Sequences per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

/// Fewest parallel pairs an alignment score is computed on.
pub const MIN_ALIGNMENT_PAIRS: usize = 50;

/// `exp` of the mean next-token negative log-likelihood of the concept
/// model over `[BOS] + sentence -> sentence + [EOS]`.
pub fn perplexity(p: &SutraPipeline, sentences: &[String]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for chunk in sentences.chunks(EVAL_BATCH) {
        let (inputs, labels): (Vec<Vec<u32>>, Vec<Vec<u32>>) = chunk.iter().map(|s| p.target_ids(s)).unzip();
        let labels: Vec<usize> = labels.iter().flatten().map(|&t| t as usize).collect();
        let mut g = Graph::new();
        let out = p.lm_forward(&mut g, &inputs)?;
        let ce = g.cross_entropy(out.logits, &labels)?;
        nll += g.value(ce).item() * labels.len() as f64;
        tokens += labels.len();
    }
    Ok((nll / tokens as f64).exp())
}

/// Mean-pooled encoder outputs, one row per text.
pub fn pooled_encodings(p: &SutraPipeline, texts: &[String], lang: &str) -> Result<Vec<Vec<f64>>> {
    let li = p.lang_index(lang)?;
    let mut rows = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EVAL_BATCH) {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|t| p.source_ids(t)).collect();
        let seqs: Vec<(&[u32], usize)> = ids.iter().map(|s| (s.as_slice(), li)).collect();
        let mut g = Graph::new();
        let (enc, packed) = p.encode(&mut g, &seqs)?;
        let pooled = g.segment_mean(enc, &packed.segments())?;
        let t = g.value(pooled);
        rows.extend((0..chunk.len()).map(|i| t.row(i).to_vec()));
    }
    Ok(rows)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub lang_a: String,
    pub lang_b: String,
    pub n_pairs: usize,
    pub parallel_cosine: f64,
    /// Mean cosine over all non-parallel `(a_i, b_j)`, `i != j`.
    pub random_pair_cosine: f64,
    /// Fraction of rows of `a` whose nearest row of `b` is their translation.
    pub retrieval_accuracy: f64,
}

/// Alignment statistics of row-parallel vector sets. Nearest-neighbor ties
/// go to the lower index.
pub fn alignment_from_vectors(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, f64, f64)> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return Err(Error::Shape(format!("alignment needs two equal sets of >= 2 rows, got {n} and {}", b.len())));
    }
    let mut parallel = 0.0;
    let mut random = 0.0;
    let mut hits = 0;
    for (i, ai) in a.iter().enumerate() {
        let sims: Vec<f64> = b.iter().map(|bj| cosine(ai, bj)).collect();
        parallel += sims[i];
        random += sims.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s).sum::<f64>();
        if crate::model::argmax(&sims) == i {
            hits += 1;
        }
    }
    Ok((
        parallel / n as f64,
        random / (n * (n - 1)) as f64,
        hits as f64 / n as f64,
    ))
}

/// Alignment of the pooled encodings of `split` items between two languages.
pub fn alignment_score(
    p: &SutraPipeline,
    corpus: &ParallelCorpus,
    split: Split,
    lang_a: &str,
    lang_b: &str,
) -> Result<AlignmentScore> {
    for l in [lang_a, lang_b] {
        if !corpus.langs.iter().any(|c| c == l) {
            return Err(Error::Config(format!("language {l} absent from corpus {:?}", corpus.langs)));
        }
    }
    let (ta, tb) = (corpus.texts(lang_a, split), corpus.texts(lang_b, split));
    if ta.len() < MIN_ALIGNMENT_PAIRS {
        return Err(Error::Data(format!(
            "alignment needs at least {MIN_ALIGNMENT_PAIRS} {} pairs, corpus has {}",
            split.name(),
            ta.len()
        )));
    }
    let a = pooled_encodings(p, &ta, lang_a)?;
    let b = pooled_encodings(p, &tb, lang_b)?;
    let (parallel_cosine, random_pair_cosine, retrieval_accuracy) = alignment_from_vectors(&a, &b)?;
    Ok(AlignmentScore {
        lang_a: lang_a.to_string(),
        lang_b: lang_b.to_string(),
        n_pairs: ta.len(),
        parallel_cosine,
        random_pair_cosine,
        retrieval_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub split: String,
    /// Every ordered pair of distinct corpus languages.
    pub pairs: Vec<AlignmentScore>,
    pub mean_parallel_cosine: f64,
    pub mean_random_pair_cosine: f64,
    pub mean_retrieval_accuracy: f64,
}

impl AlignmentReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("alignment ({} split)\n", self.split);
        let _ = writeln!(s, "{:<8} {:<8} {:>6} {:>10} {:>10} {:>10}", "a", "b", "pairs", "parallel", "random", "retrieval");
        for r in &self.pairs {
            let _ = writeln!(
                s,
                "{:<8} {:<8} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                r.lang_a, r.lang_b, r.n_pairs, r.parallel_cosine, r.random_pair_cosine, r.retrieval_accuracy
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:<8} {:>6} {:>10.4} {:>10.4} {:>10.4}",
            "mean", "", "", self.mean_parallel_cosine, self.mean_random_pair_cosine, self.mean_retrieval_accuracy
        );
        s
    }
}

/// Alignment over every ordered pair of corpus languages the pipeline knows.
pub fn alignment_report(p: &SutraPipeline, corpus: &ParallelCorpus, split: Split) -> Result<AlignmentReport> {
    let langs: Vec<&String> = corpus.langs.iter().filter(|l| p.langs.contains(l)).collect();
    if langs.len() < 2 {
        return Err(Error::Config(format!(
            "alignment needs two languages known to the pipeline; corpus has {:?}, pipeline {:?}",
            corpus.langs, p.langs
        )));
    }
    let mut pooled = BTreeMap::new();
    for l in &langs {
        let texts = corpus.texts(l, split);
        if texts.len() < MIN_ALIGNMENT_PAIRS {
            return Err(Error::Data(format!(
                "alignment needs at least {MIN_ALIGNMENT_PAIRS} {} pairs, corpus has {}",
                split.name(),
                texts.len()
            )));
        }
        pooled.insert(l.as_str(), pooled_encodings(p, &texts, l)?);
    }
    let mut pairs = Vec::new();
    for a in &langs {
        for b in &langs {
            if a == b {
                continue;
            }
            let (va, vb) = (&pooled[a.as_str()], &pooled[b.as_str()]);
            let (parallel_cosine, random_pair_cosine, retrieval_accuracy) = alignment_from_vectors(va, vb)?;
            pairs.push(AlignmentScore {
                lang_a: a.to_string(),
                lang_b: b.to_string(),
                n_pairs: va.len(),
                parallel_cosine,
                random_pair_cosine,
                retrieval_accuracy,
            });
        }
    }
    let mean = |f: fn(&AlignmentScore) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    Ok(AlignmentReport {
        split: split.name().to_string(),
        mean_parallel_cosine: mean(|r| r.parallel_cosine),
        mean_random_pair_cosine: mean(|r| r.random_pair_cosine),
        mean_retrieval_accuracy: mean(|r| r.retrieval_accuracy),
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub n_items: usize,
    pub accuracy: BTreeMap<String, f64>,
    pub min: f64,
    pub max: f64,
    /// `max - min` over languages.
    pub gap: f64,
    pub chance: f64,
}

impl ConsistencyReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("consistency over {} items (chance {:.2})\n", self.n_items, self.chance);
        let _ = writeln!(s, "{:<8} {:>9}", "lang", "accuracy");
        for (l, a) in &self.accuracy {
            let _ = writeln!(s, "{:<8} {:>9.4}", l, a);
        }
        let _ = writeln!(s, "{:<8} {:>9.4}", "gap", self.gap);
        s
    }
}

/// Scores answers from `answer(item, lang)` by exact match against the
/// item's correct option text.
pub fn consistency_eval_with(
    items: &[QaItem],
    langs: &[&str],
    mut answer: impl FnMut(&QaItem, &str) -> Result<String>,
) -> Result<ConsistencyReport> {
    if items.is_empty() || langs.is_empty() {
        return Err(Error::Data("consistency needs at least one item and one language".into()));
    }
    for it in items {
        for l in langs {
            if !it.questions.contains_key(*l) || !it.options.contains_key(*l) {
                return Err(Error::Data(format!(
                    "QA sets are not meaning-aligned: item {} has no {l} version",
                    it.meaning_key
                )));
            }
        }
    }
    let mut accuracy = BTreeMap::new();
    for &l in langs {
        let mut hits = 0;
        for it in items {
            if answer(it, l)? == it.answer_text(l)? {
                hits += 1;
            }
        }
        accuracy.insert(l.to_string(), hits as f64 / items.len() as f64);
    }
    let min = accuracy.values().copied().fold(f64::INFINITY, f64::min);
    let max = accuracy.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ConsistencyReport {
        n_items: items.len(),
        accuracy,
        min,
        max,
        gap: max - min,
        chance: 1.0 / N_OPTIONS as f64,
    })
}

/// Per-language QA accuracy of greedy decoding from the prompt in each
/// language into the same language, constrained to the item's options.
pub fn consistency_eval(p: &SutraPipeline, items: &[QaItem], langs: &[&str]) -> Result<ConsistencyReport> {
    consistency_eval_with(items, langs, |it, l| {
        let options = it.options(l)?;
        let i = p.choose_option(&it.prompt(l)?, l, l, options)?;
        Ok(options[i].clone())
    })
}

/// Groups per-language QA lists into meaning-aligned items, failing when
/// the lists do not cover the same meaning keys in the same order.
pub fn align_qa_sets(sets: &BTreeMap<String, Vec<QaItem>>) -> Result<Vec<QaItem>> {
    let mut iter = sets.iter();
    let Some((first_lang, first)) = iter.next() else {
        return Ok(Vec::new());
    };
    let mut out = first.clone();
    for (lang, set) in iter {
        let keys_a: Vec<&str> = first.iter().map(|i| i.meaning_key.as_str()).collect();
        let keys_b: Vec<&str> = set.iter().map(|i| i.meaning_key.as_str()).collect();
        if keys_a != keys_b {
            let at = keys_a.iter().zip(&keys_b).position(|(a, b)| a != b).unwrap_or(keys_a.len().min(keys_b.len()));
            return Err(Error::Data(format!(
                "QA sets for {first_lang} and {lang} differ in meaning keys at item {at}"
            )));
        }
        for (dst, src) in out.iter_mut().zip(set) {
            if dst.answer != src.answer {
                return Err(Error::Data(format!("{}: answer differs between {first_lang} and {lang}", dst.meaning_key)));
            }
            dst.questions.extend(src.questions.clone());
            dst.options.extend(src.options.clone());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FertilityComparisonRow {
    pub lang: String,
    pub words: usize,
    pub base_tokens: usize,
    pub other_tokens: usize,
    /// `other_tokens / base_tokens`.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FertilityComparison {
    pub base: String,
    pub other: String,
    pub rows: Vec<FertilityComparisonRow>,
}

impl FertilityComparison {
    pub fn row(&self, lang: &str) -> Option<&FertilityComparisonRow> {
        self.rows.iter().find(|r| r.lang == lang)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("tokens: {} vs {}\n", self.other, self.base);
        let _ = writeln!(s, "{:<8} {:>8} {:>10} {:>10} {:>8}", "lang", "words", "base", "other", "ratio");
        for r in &self.rows {
            let ratio = r.ratio.map(|x| format!("{x:.4}")).unwrap_or_else(|| "EMPTY".into());
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>10} {:>10} {:>8}",
                r.lang, r.words, r.base_tokens, r.other_tokens, ratio
            );
        }
        s
    }
}

/// Token counts of two tokenizers on the same per-language texts.
pub fn fertility_eval(
    base: (&str, &TokenizerModel),
    other: (&str, &TokenizerModel),
    corpus_by_lang: &[(String, Vec<String>)],
) -> FertilityComparison {
    let rb = fertility(base.1, corpus_by_lang, base.0);
    let ro = fertility(other.1, corpus_by_lang, other.0);
    let rows = rb
        .rows
        .iter()
        .zip(&ro.rows)
        .map(|(b, o)| FertilityComparisonRow {
            lang: b.lang.clone(),
            words: b.words,
            base_tokens: b.tokens,
            other_tokens: o.tokens,
            ratio: (b.tokens > 0).then(|| o.tokens as f64 / b.tokens as f64),
        })
        .collect();
    FertilityComparison {
        base: base.0.to_string(),
        other: other.0.to_string(),
        rows,
    }
}
