use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codec::{LanguageDecoder, LanguageEncoder};
use super::concept::{ConceptModel, ConceptOutput};
use super::config::ModelConfig;
use super::layers::Packed;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Initializer, ParamSink, ParamStore, Tensor, Var};
use crate::tokenizer::{TokenizerModel, BOS_ID, EOS_ID};

/// The three sub-networks, declared in a fixed order.
#[derive(Clone, Debug)]
pub struct Modules {
    pub concept: ConceptModel,
    pub encoder: LanguageEncoder,
    pub decoder: LanguageDecoder,
}

impl Modules {
    pub fn declare(sink: &mut impl ParamSink, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            concept: ConceptModel::new(sink, cfg)?,
            encoder: LanguageEncoder::new(sink, cfg),
            decoder: LanguageDecoder::new(sink, cfg),
        })
    }
}

/// Language-model pass over packed sequences.
#[derive(Clone, Debug)]
pub struct LmOutput {
    /// `[Σ T, V]` next-token logits.
    pub logits: Var,
    /// `[Σ T, d_model]` rows before the output projection.
    pub hidden: Var,
    pub packed: Packed,
    pub expert_load: Vec<Vec<usize>>,
}

/// Tokenizer, encoder, concept model and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct SutraPipeline {
    pub config: ModelConfig,
    pub tokenizer: TokenizerModel,
    pub langs: Vec<String>,
    pub store: ParamStore,
    pub modules: Modules,
    pub phases_completed: BTreeSet<u8>,
}

impl SutraPipeline {
    /// Freshly initialized pipeline; weights are drawn from `config.seed`.
    pub fn new(config: ModelConfig, tokenizer: TokenizerModel, langs: Vec<String>) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "config vocab_size {} but tokenizer has {} entries",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        if langs.len() != config.n_languages {
            return Err(Error::Config(format!(
                "config expects {} languages, got {:?}",
                config.n_languages, langs
            )));
        }
        let unique: BTreeSet<&String> = langs.iter().collect();
        if unique.len() != langs.len() {
            return Err(Error::Config(format!("duplicate language ids in {langs:?}")));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let modules = Modules::declare(&mut Initializer::new(&mut store, &mut rng), &config)?;
        Ok(Self {
            config,
            tokenizer,
            langs,
            store,
            modules,
            phases_completed: BTreeSet::new(),
        })
    }

    pub fn lang_index(&self, lang: &str) -> Result<usize> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Config(format!("unknown language {lang:?}, pipeline has {:?}", self.langs)))
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if ids.len() > self.config.context_window {
            return Err(Error::Context {
                len: ids.len(),
                window: self.config.context_window,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn pack(&self, seqs: &[(&[u32], usize)]) -> Result<Packed> {
        if seqs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for (ids, _) in seqs {
            self.check_ids(ids)?;
        }
        Ok(Packed::new(seqs.iter().map(|(ids, _)| ids.len()).collect()))
    }

    /// Next-token logits of the concept model used as a plain causal LM.
    pub fn lm_forward(&self, g: &mut Graph, batch: &[Vec<u32>]) -> Result<LmOutput> {
        let seqs: Vec<(&[u32], usize)> = batch.iter().map(|s| (s.as_slice(), 0)).collect();
        let packed = self.pack(&seqs)?;
        let ids: Vec<usize> = batch.iter().flatten().map(|&i| i as usize).collect();
        let c = &self.modules.concept;
        let x = c.embed(g, &self.store, &ids)?;
        let ConceptOutput { hidden, expert_load } = c.transform(g, &self.store, x, &packed)?;
        let logits = c.project(g, &self.store, hidden)?;
        Ok(LmOutput {
            logits,
            hidden,
            packed,
            expert_load,
        })
    }

    /// Encoder outputs for packed `(ids, language index)` sequences.
    pub fn encode(&self, g: &mut Graph, seqs: &[(&[u32], usize)]) -> Result<(Var, Packed)> {
        let packed = self.pack(seqs)?;
        let out = self.modules.encoder.forward(g, &self.store, seqs, &packed)?;
        Ok((out, packed))
    }

    /// Applies the concept stack to vectors without touching its token embedding.
    pub fn concept_transform(&self, g: &mut Graph, x: Var, packed: &Packed) -> Result<ConceptOutput> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.config.d_model || shape[0] != packed.rows() {
            return Err(Error::Shape(format!(
                "concept vectors {:?}, expected [{}, {}]",
                shape,
                packed.rows(),
                self.config.d_model
            )));
        }
        self.modules.concept.transform(g, &self.store, x, packed)
    }

    /// Decoder logits for every position of the packed target inputs.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        mem: &Packed,
        targets: &[(&[u32], usize)],
    ) -> Result<(Var, Packed)> {
        let packed = self.pack(targets)?;
        let d = &self.modules.decoder;
        let h = d.hidden(g, &self.store, targets, &packed, memory, mem)?;
        Ok((d.project(g, &self.store, h)?, packed))
    }

    /// Source token ids: the text followed by end-of-sequence.
    pub fn source_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenizer.encode(text);
        ids.push(EOS_ID);
        ids
    }

    /// Teacher-forcing pair: `[BOS] + target` as input, `target + [EOS]` as labels.
    pub fn target_ids(&self, text: &str) -> (Vec<u32>, Vec<u32>) {
        let ids = self.tokenizer.encode(text);
        let mut input = vec![BOS_ID];
        input.extend(&ids);
        let mut labels = ids;
        labels.push(EOS_ID);
        (input, labels)
    }

    /// Encoder output for one sequence as a `[T, d_model]` tensor.
    pub fn encode_language(&self, ids: &[u32], lang: &str) -> Result<Tensor> {
        let li = self.lang_index(lang)?;
        let mut g = Graph::new();
        let (out, _) = self.encode(&mut g, &[(ids, li)])?;
        Ok(g.value(out).clone())
    }

    /// Encoder followed by the concept stack.
    pub fn concept_vectors(&self, ids: &[u32], lang: &str) -> Result<Tensor> {
        let li = self.lang_index(lang)?;
        let mut g = Graph::new();
        let (enc, packed) = self.encode(&mut g, &[(ids, li)])?;
        let c = self.concept_transform(&mut g, enc, &packed)?;
        Ok(g.value(c.hidden).clone())
    }

    /// Next-token logits given row-major `[T, d_model]` concept vectors.
    pub fn decode_language(&self, concepts: &[f64], target_lang: &str, prefix: &[u32]) -> Result<Vec<f64>> {
        let li = self.lang_index(target_lang)?;
        let d = self.config.d_model;
        if concepts.is_empty() || concepts.len() % d != 0 {
            return Err(Error::Shape(format!(
                "decoder needs a non-empty [T, {d}] concept sequence, got {} values",
                concepts.len()
            )));
        }
        if prefix.len() >= self.config.context_window {
            return Err(Error::Context {
                len: prefix.len() + 1,
                window: self.config.context_window,
            });
        }
        let t = concepts.len() / d;
        let mut input = vec![BOS_ID];
        input.extend_from_slice(prefix);
        let mut g = Graph::new();
        let memory = g.constant(Tensor::new(vec![t, d], concepts.to_vec())?);
        let mem = Packed::new(vec![t]);
        self.next_token_logits(&mut g, memory, &mem, &input, li)
    }

    fn next_token_logits(&self, g: &mut Graph, memory: Var, mem: &Packed, input: &[u32], lang: usize) -> Result<Vec<f64>> {
        let targets = [(input, lang)];
        let packed = self.pack(&targets)?;
        let dec = &self.modules.decoder;
        let h = dec.hidden(g, &self.store, &targets, &packed, memory, mem)?;
        let last = g.gather_rows(h, &[input.len() - 1])?;
        let logits = dec.project(g, &self.store, last)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Greedy translation of `text` from `source_lang` into `target_lang`.
    pub fn generate(&self, text: &str, source_lang: &str, target_lang: &str, max_len: usize) -> Result<String> {
        if !self.phases_completed.contains(&2) {
            return Err(Error::State(
                "generation needs a pipeline whose codec has been trained (phase 2)".into(),
            ));
        }
        let ids = self.generate_ids(text, source_lang, target_lang, max_len)?;
        self.tokenizer.decode(&ids)
    }

    /// Greedy decode without the training-state check. Returns generated
    /// ids without the terminating end-of-sequence.
    pub fn generate_ids(&self, text: &str, source_lang: &str, target_lang: &str, max_len: usize) -> Result<Vec<u32>> {
        if max_len > self.config.context_window {
            return Err(Error::Context {
                len: max_len,
                window: self.config.context_window,
            });
        }
        let (src, tgt) = (self.lang_index(source_lang)?, self.lang_index(target_lang)?);
        if max_len == 0 {
            return Ok(Vec::new());
        }
        let ids = self.source_ids(text);
        let mut g = Graph::new();
        let (enc, mem) = self.encode(&mut g, &[(&ids, src)])?;
        let c = self.concept_transform(&mut g, enc, &mem)?;
        let concepts = g.value(c.hidden).clone();
        let mut input = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::new();
            let memory = g.constant(concepts.clone());
            let logits = self.next_token_logits(&mut g, memory, &mem, &input, tgt)?;
            let next = argmax(&logits) as u32;
            if next == EOS_ID {
                break;
            }
            out.push(next);
            input.push(next);
        }
        Ok(out)
    }
}

impl SutraPipeline {
    /// Greedy decoding restricted at every step to tokens that continue one
    /// of `options` (each followed by end-of-sequence). Returns the index of
    /// the option produced; equal logits go to the lower token id.
    pub fn choose_option<S: AsRef<str>>(
        &self,
        text: &str,
        source_lang: &str,
        target_lang: &str,
        options: &[S],
    ) -> Result<usize> {
        if options.is_empty() {
            return Err(Error::Data("no options to choose from".into()));
        }
        let (src, tgt) = (self.lang_index(source_lang)?, self.lang_index(target_lang)?);
        let seqs: Vec<Vec<u32>> = options
            .iter()
            .map(|o| {
                let mut v = self.tokenizer.encode(o.as_ref());
                v.push(EOS_ID);
                v
            })
            .collect();
        let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if longest > self.config.context_window {
            return Err(Error::Context {
                len: longest,
                window: self.config.context_window,
            });
        }
        let ids = self.source_ids(text);
        let mut g = Graph::new();
        let (enc, mem) = self.encode(&mut g, &[(&ids, src)])?;
        let c = self.concept_transform(&mut g, enc, &mem)?;
        let concepts = g.value(c.hidden).clone();
        let mut alive: Vec<usize> = (0..seqs.len()).collect();
        let mut input = vec![BOS_ID];
        for pos in 0.. {
            let first = alive[0];
            if alive.iter().all(|&a| seqs[a] == seqs[first]) {
                return Ok(first);
            }
            let mut g = Graph::new();
            let memory = g.constant(concepts.clone());
            let logits = self.next_token_logits(&mut g, memory, &mem, &input, tgt)?;
            let best = alive
                .iter()
                .map(|&a| seqs[a][pos])
                .fold(None::<u32>, |b, t| match b {
                    Some(b) if logits[b as usize] > logits[t as usize] => Some(b),
                    Some(b) if logits[b as usize] == logits[t as usize] && b < t => Some(b),
                    _ => Some(t),
                })
                .expect("at least one live option");
            alive.retain(|&a| seqs[a][pos] == best);
            input.push(best);
        }
        unreachable!("options are finite")
    }
}

/// Index of the largest value, ties to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
