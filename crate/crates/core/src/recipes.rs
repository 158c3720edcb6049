//! Ready-made desk-scale setups: a synthetic world with its merged
//! tokenizer, and training configs that run on one CPU core in minutes.

use crate::corpus::{
    build_parallel_corpus, build_qa_corpus, generate_kb, make_languages, qa_for_statements, ConceptStatement,
    LanguageSpec, ParallelCorpus, QaItem, Split,
};
use crate::error::Result;
use crate::model::{ModelConfig, SutraPipeline};
use crate::tokenizer::{merge_vocabs, train, Algorithm, TokenizerModel};
use crate::training::{train_phase2, train_phase3, TrainConfig, TrainReport};

/// Target size of the pivot-only tokenizer.
pub const BASE_VOCAB: usize = 1200;
/// Target size of the tokenizer learned on the non-pivot scripts.
pub const EXTENSION_VOCAB: usize = 1900;

/// Seed of the standard world.
pub const WORLD_SEED: u64 = 7;
/// Phase 1 on its own, pivot corpus of about 50k tokens.
pub const PHASE1_STEPS: usize = 1000;
/// Short phase 1 ahead of codec training.
pub const WARMUP_PHASE1_STEPS: usize = 300;
/// Phase 2 runs as this many cycles of [`PHASE2_CYCLE_STEPS`]; each
/// cycle restarts the optimizer and reshuffles with a new seed.
pub const PHASE2_CYCLES: usize = 5;
pub const PHASE2_CYCLE_STEPS: usize = 1000;
/// Phase-2 cycles of the pivot-only baseline.
pub const MONO_PHASE2_CYCLES: usize = 1;
/// Phase 3 runs as warm-restarted cycles.
pub const PHASE3_CYCLES: usize = 2;
pub const PHASE3_CYCLE_STEPS: usize = 500;
/// Questions used to fine-tune and evaluate phase 3.
pub const QA_ITEMS: usize = 300;
/// Fine-tuning versions of each question.
pub const QA_RENDERINGS: usize = 4;

/// A generated world: languages, knowledge base, parallel corpus and the
/// tokenizers learned on its training split.
#[derive(Clone, Debug)]
pub struct DeskWorld {
    pub specs: Vec<LanguageSpec>,
    pub kb: Vec<ConceptStatement>,
    pub corpus: ParallelCorpus,
    /// Learned on pivot training text only.
    pub base_tokenizer: TokenizerModel,
    /// Learned on the other languages' training text.
    pub extension_tokenizer: TokenizerModel,
    /// `base_tokenizer` extended with `extension_tokenizer`.
    pub tokenizer: TokenizerModel,
}

impl DeskWorld {
    /// `n_langs` languages over `statements` facts; `held_out` items each go
    /// to the validation and test splits.
    pub fn build(n_langs: usize, statements: usize, held_out: usize, seed: u64) -> Result<Self> {
        let specs = make_languages(n_langs);
        let kb = generate_kb(seed, statements)?;
        let f = held_out as f64 / statements as f64;
        let corpus = build_parallel_corpus(&kb, &specs, [1.0 - 2.0 * f, f, f], seed)?;
        let pivot = corpus.texts(&corpus.langs[0], Split::Train);
        let others: Vec<String> = corpus.langs[1..]
            .iter()
            .flat_map(|l| corpus.texts(l, Split::Train))
            .collect();
        let base_tokenizer = train(&pivot, BASE_VOCAB, Algorithm::Bpe)?;
        let extension_tokenizer = train(&others, EXTENSION_VOCAB, Algorithm::Bpe)?;
        let tokenizer = merge_vocabs(&base_tokenizer, &extension_tokenizer)?;
        Ok(Self {
            specs,
            kb,
            corpus,
            base_tokenizer,
            extension_tokenizer,
            tokenizer,
        })
    }

    /// Three languages, 5000 facts, 200 held-out pairs per split.
    pub fn standard(seed: u64) -> Result<Self> {
        Self::build(3, 5000, 200, seed)
    }

    pub fn pivot(&self) -> &str {
        &self.corpus.langs[0]
    }

    /// Desk model config sized to this world's tokenizer and languages.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: self.tokenizer.vocab_size(),
            n_languages: self.corpus.langs.len(),
            seed,
            ..ModelConfig::desk()
        }
    }

    pub fn pipeline(&self, seed: u64) -> Result<SutraPipeline> {
        SutraPipeline::new(self.model_config(seed), self.tokenizer.clone(), self.corpus.langs.clone())
    }

    /// Per-language text of a split, in corpus language order.
    pub fn texts_by_lang(&self, split: Split) -> Vec<(String, Vec<String>)> {
        self.corpus
            .langs
            .iter()
            .map(|l| (l.clone(), self.corpus.texts(l, split)))
            .collect()
    }

    /// Questions about `n_items` facts: `renderings` versions of each to
    /// fine-tune on, and one more with fresh distractors and option order to
    /// evaluate on.
    pub fn qa_sets(&self, n_items: usize, renderings: usize, seed: u64) -> Result<(Vec<QaItem>, Vec<QaItem>)> {
        let first = build_qa_corpus(&self.kb, &self.specs, n_items, seed)?;
        let facts: Vec<ConceptStatement> = first
            .iter()
            .map(|it| {
                self.kb
                    .iter()
                    .find(|st| st.meaning_key() == it.meaning_key)
                    .expect("QA items come from the knowledge base")
                    .clone()
            })
            .collect();
        let render = |r: u64| qa_for_statements(&facts, &self.kb, &self.specs, seed ^ (0x9E37_79B9 * r));
        let mut train_items = first;
        for r in 1..renderings as u64 {
            train_items.extend(render(r)?);
        }
        let eval_items = render(renderings as u64 + 1)?;
        Ok((train_items, eval_items))
    }
}

/// Concept-model language modelling on pivot sentences.
pub fn phase1_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::for_phase(1)
    }
}

/// Codec training with translation and alignment.
pub fn phase2_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::for_phase(2)
    }
}

/// Runs `cfg` `cycles` times in a row, each with seed `cfg.seed + k` and a
/// fresh optimizer. Without `rewarm` only the first cycle warms up.
pub fn train_cycles(
    cfg: &TrainConfig,
    cycles: usize,
    rewarm: bool,
    mut run: impl FnMut(&TrainConfig) -> Result<TrainReport>,
) -> Result<Vec<TrainReport>> {
    (0..cycles)
        .map(|k| {
            let c = TrainConfig {
                seed: cfg.seed + k as u64,
                warmup_fraction: if k == 0 || rewarm { cfg.warmup_fraction } else { 0.0 },
                ..cfg.clone()
            };
            run(&c)
        })
        .collect()
}

/// The desk phase-2 schedule.
pub fn train_phase2_cycles(corpus: &ParallelCorpus, p: &mut SutraPipeline, monolingual: bool) -> Result<Vec<TrainReport>> {
    let cfg = TrainConfig {
        monolingual,
        ..phase2_config(PHASE2_CYCLE_STEPS)
    };
    let cycles = if monolingual { MONO_PHASE2_CYCLES } else { PHASE2_CYCLES };
    train_cycles(&cfg, cycles, false, |c| train_phase2(c, corpus, p, None))
}

/// The desk phase-3 schedule.
pub fn train_phase3_cycles(items: &[QaItem], p: &mut SutraPipeline, monolingual: bool) -> Result<Vec<TrainReport>> {
    let cfg = TrainConfig {
        monolingual,
        ..phase3_config(PHASE3_CYCLE_STEPS)
    };
    train_cycles(&cfg, PHASE3_CYCLES, true, |c| train_phase3(c, items, p, None))
}

/// End-to-end question-answering fine-tuning.
pub fn phase3_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::for_phase(3)
    }
}
