use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::concepts::QUESTION_WORD;
use super::kb::{ConceptStatement, Template};
use super::language::LanguageSpec;
use crate::error::{Error, Result};

pub const N_OPTIONS: usize = 4;

/// A four-way multiple-choice question about one fact, rendered in every
/// language with the same option order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub meaning_key: String,
    /// Index of the correct option.
    pub answer: usize,
    /// Options as concept symbols.
    pub option_symbols: [String; N_OPTIONS],
    pub questions: BTreeMap<String, String>,
    pub options: BTreeMap<String, [String; N_OPTIONS]>,
}

impl QaItem {
    pub fn langs(&self) -> impl Iterator<Item = &str> {
        self.questions.keys().map(String::as_str)
    }

    pub fn question(&self, lang: &str) -> Result<&str> {
        self.questions
            .get(lang)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("{} has no question in {lang}", self.meaning_key)))
    }

    pub fn options(&self, lang: &str) -> Result<&[String; N_OPTIONS]> {
        self.options
            .get(lang)
            .ok_or_else(|| Error::Data(format!("{} has no options in {lang}", self.meaning_key)))
    }

    /// Question followed by the options, space-separated.
    pub fn prompt(&self, lang: &str) -> Result<String> {
        let mut s = self.question(lang)?.to_string();
        for o in self.options(lang)? {
            s.push(' ');
            s.push_str(o);
        }
        Ok(s)
    }

    pub fn answer_text(&self, lang: &str) -> Result<&str> {
        Ok(&self.options(lang)?[self.answer])
    }
}

/// One JSONL line: `{meaning_key, question, options, answer, lang}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QaLine {
    pub meaning_key: String,
    pub question: String,
    pub options: [String; N_OPTIONS],
    pub answer: usize,
    pub lang: String,
}

/// Picks `n_items` statements of `kb` that have enough distractors and
/// turns each into a question.
pub fn build_qa_corpus(
    kb: &[ConceptStatement],
    specs: &[LanguageSpec],
    n_items: usize,
    seed: u64,
) -> Result<Vec<QaItem>> {
    let pools = Pools::new(kb);
    let mut idx: Vec<usize> = (0..kb.len())
        .filter(|&i| pools.candidates(&kb[i]).len() >= N_OPTIONS - 1)
        .collect();
    if n_items > idx.len() {
        return Err(Error::Capacity(format!(
            "{n_items} questions requested, the knowledge base of {} supports {}",
            kb.len(),
            idx.len()
        )));
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n_items);
    idx.sort_unstable();
    let targets: Vec<ConceptStatement> = idx.into_iter().map(|i| kb[i].clone()).collect();
    qa_for_statements(&targets, kb, specs, seed ^ 0xD157_0000)
}

/// Attribute -> values seen in a kb; entities taking part in any relation.
struct Pools<'a> {
    values: BTreeMap<&'a str, BTreeSet<&'a str>>,
    related: BTreeSet<&'a str>,
}

impl<'a> Pools<'a> {
    fn new(kb: &'a [ConceptStatement]) -> Self {
        let mut values: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let mut related = BTreeSet::new();
        for st in kb {
            match st.template {
                Template::Attribute => {
                    values.entry(&st.slots[1]).or_default().insert(&st.slots[2]);
                }
                Template::Relation => {
                    related.insert(st.slots[2].as_str());
                    related.insert(st.slots[0].as_str());
                }
            }
        }
        Self { values, related }
    }

    fn candidates(&self, st: &ConceptStatement) -> Vec<&'a str> {
        let correct = st.slots[2].as_str();
        let pool = match st.template {
            Template::Attribute => self.values.get(st.slots[1].as_str()),
            Template::Relation => Some(&self.related),
        };
        pool.into_iter()
            .flatten()
            .copied()
            .filter(|v| *v != correct && *v != st.slots[0])
            .collect()
    }
}

/// Builds one question per target with distractors drawn from the values
/// of other statements in `kb`. Different seeds give the same questions
/// with different distractors and option order.
pub fn qa_for_statements(
    targets: &[ConceptStatement],
    kb: &[ConceptStatement],
    specs: &[LanguageSpec],
    seed: u64,
) -> Result<Vec<QaItem>> {
    let pools = Pools::new(kb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets
        .iter()
        .map(|st| {
            let correct = st.slots[2].as_str();
            let mut candidates = pools.candidates(st);
            if candidates.len() < N_OPTIONS - 1 {
                return Err(Error::Capacity(format!(
                    "{} has {} distractors, needs {}",
                    st.meaning_key(),
                    candidates.len(),
                    N_OPTIONS - 1
                )));
            }
            candidates.shuffle(&mut rng);
            let answer = rng.random_range(0..N_OPTIONS);
            let mut distractors = candidates.into_iter();
            let option_symbols: [String; N_OPTIONS] = std::array::from_fn(|i| {
                if i == answer {
                    correct.to_string()
                } else {
                    distractors.next().expect("checked above").to_string()
                }
            });
            let mut questions = BTreeMap::new();
            let mut options = BTreeMap::new();
            for spec in specs {
                let q = spec.realize_slots(&[&st.slots[0], &st.slots[1], QUESTION_WORD])?;
                let opts = option_symbols
                    .iter()
                    .map(|o| spec.word(o).map(str::to_string))
                    .collect::<Result<Vec<_>>>()?;
                questions.insert(spec.lang_id.clone(), q);
                options.insert(spec.lang_id.clone(), opts.try_into().expect("four options"));
            }
            Ok(QaItem {
                meaning_key: st.meaning_key(),
                answer,
                option_symbols,
                questions,
                options,
            })
        })
        .collect()
}

/// Accuracy of a guessing policy that ignores the question.
pub fn guess_accuracy(items: &[QaItem], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let choices: Vec<usize> = (0..N_OPTIONS).collect();
    let hits = items
        .iter()
        .filter(|it| *choices.choose(&mut rng).expect("non-empty") == it.answer)
        .count();
    hits as f64 / items.len().max(1) as f64
}

pub fn write_qa_jsonl(items: &[QaItem], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        for lang in item.langs() {
            let line = QaLine {
                meaning_key: item.meaning_key.clone(),
                question: item.questions[lang].clone(),
                options: item.options[lang].clone(),
                answer: item.answer,
                lang: lang.to_string(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads QA lines, grouping consecutive lines with the same meaning key.
/// Option symbols are not part of the line format, so the first
/// language's options stand in for them.
pub fn read_qa_jsonl(path: &Path) -> Result<Vec<QaItem>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items: Vec<QaItem> = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaLine = serde_json::from_str(&line)?;
        if rec.answer >= N_OPTIONS {
            return Err(Error::Data(format!(
                "{}: answer index {} out of range",
                rec.meaning_key, rec.answer
            )));
        }
        match items.last_mut() {
            Some(item) if item.meaning_key == rec.meaning_key => {
                if item.answer != rec.answer {
                    return Err(Error::Data(format!(
                        "{}: answer differs across languages",
                        rec.meaning_key
                    )));
                }
                item.questions.insert(rec.lang.clone(), rec.question);
                item.options.insert(rec.lang, rec.options);
            }
            _ => items.push(QaItem {
                meaning_key: rec.meaning_key,
                answer: rec.answer,
                option_symbols: rec.options.clone(),
                questions: BTreeMap::from([(rec.lang.clone(), rec.question)]),
                options: BTreeMap::from([(rec.lang, rec.options)]),
            }),
        }
    }
    Ok(items)
}
