use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kb::ConceptStatement;
use super::language::{realize, LanguageSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One meaning rendered in every language of the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelItem {
    pub meaning_key: String,
    pub split: Split,
    /// Language id to surface sentence.
    pub texts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub langs: Vec<String>,
    pub items: Vec<ParallelItem>,
}

/// One JSONL line: `{meaning_key, lang, text}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParallelLine {
    pub meaning_key: String,
    pub lang: String,
    pub text: String,
}

/// Renders every statement in every language and splits by meaning key.
pub fn build_parallel_corpus(
    kb: &[ConceptStatement],
    specs: &[LanguageSpec],
    split_ratios: [f64; 3],
    seed: u64,
) -> Result<ParallelCorpus> {
    if specs.len() < 2 {
        return Err(Error::Config(format!(
            "parallel corpus needs at least 2 languages, got {}",
            specs.len()
        )));
    }
    let total: f64 = split_ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || split_ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios {split_ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..kb.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (split_ratios[0] * kb.len() as f64).round() as usize;
    let n_valid = ((split_ratios[1] * kb.len() as f64).round() as usize).min(kb.len() - n_train);
    let mut split_of = vec![Split::Test; kb.len()];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    let items = kb
        .iter()
        .zip(split_of)
        .map(|(st, split)| {
            let texts = specs
                .iter()
                .map(|sp| Ok((sp.lang_id.clone(), realize(st, sp)?)))
                .collect::<Result<_>>()?;
            Ok(ParallelItem {
                meaning_key: st.meaning_key(),
                split,
                texts,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ParallelCorpus {
        langs: specs.iter().map(|s| s.lang_id.clone()).collect(),
        items,
    })
}

impl ParallelCorpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ParallelItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn texts(&self, lang: &str, split: Split) -> Vec<String> {
        self.split(split)
            .filter_map(|i| i.texts.get(lang).cloned())
            .collect()
    }

    /// Restricts to a subset of languages.
    pub fn with_langs(&self, langs: &[&str]) -> Self {
        Self {
            langs: langs.iter().map(|s| s.to_string()).collect(),
            items: self
                .items
                .iter()
                .map(|i| ParallelItem {
                    meaning_key: i.meaning_key.clone(),
                    split: i.split,
                    texts: i
                        .texts
                        .iter()
                        .filter(|(l, _)| langs.contains(&l.as_str()))
                        .map(|(l, t)| (l.clone(), t.clone()))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Writes `parallel.<split>.jsonl` files into `dir`.
    pub fn write_jsonl(&self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            let path = dir.join(format!("parallel.{}.jsonl", split.name()));
            let mut out = Vec::new();
            for item in self.split(split) {
                for lang in &self.langs {
                    let line = ParallelLine {
                        meaning_key: item.meaning_key.clone(),
                        lang: lang.clone(),
                        text: item.texts[lang].clone(),
                    };
                    serde_json::to_writer(&mut out, &line)?;
                    out.push(b'\n');
                }
            }
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&out).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads the files written by [`write_jsonl`](Self::write_jsonl).
    pub fn read_jsonl(dir: &Path) -> Result<Self> {
        let mut langs: Vec<String> = Vec::new();
        let mut items: Vec<ParallelItem> = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("parallel.{}.jsonl", split.name()));
            let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut current: Option<ParallelItem> = None;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ParallelLine = serde_json::from_str(&line)?;
                if !langs.contains(&rec.lang) {
                    langs.push(rec.lang.clone());
                }
                match current.as_mut() {
                    Some(item) if item.meaning_key == rec.meaning_key => {
                        item.texts.insert(rec.lang, rec.text);
                    }
                    _ => {
                        items.extend(current.take());
                        current = Some(ParallelItem {
                            meaning_key: rec.meaning_key,
                            split,
                            texts: BTreeMap::from([(rec.lang, rec.text)]),
                        });
                    }
                }
            }
            items.extend(current);
        }
        for item in &items {
            if item.texts.len() != langs.len() {
                return Err(Error::Data(format!(
                    "{} has {} of {} languages",
                    item.meaning_key,
                    item.texts.len(),
                    langs.len()
                )));
            }
        }
        Ok(Self { langs, items })
    }
}
