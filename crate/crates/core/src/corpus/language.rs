use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::concepts::{attribute_index, concept_vocabulary, relation_index};
use super::kb::{ConceptStatement, Template};
use crate::error::{Error, Result};

/// Permutation of the three template slots `[subject, predicate, object]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WordOrder(pub [usize; 3]);

impl WordOrder {
    pub const SVO: Self = Self([0, 1, 2]);
    pub const SOV: Self = Self([0, 2, 1]);
    pub const VSO: Self = Self([1, 0, 2]);
    pub const OSV: Self = Self([2, 0, 1]);
    pub const VOS: Self = Self([1, 2, 0]);
    pub const OVS: Self = Self([2, 1, 0]);

    /// Slot order equal to the concept template order.
    pub const fn identity() -> Self {
        Self::SVO
    }

    /// Order used for the `i`-th generated language.
    pub fn nth(i: usize) -> Self {
        [Self::SVO, Self::SOV, Self::VSO, Self::OSV, Self::VOS, Self::OVS][i % 6]
    }

    fn is_permutation(&self) -> bool {
        let mut seen = [false; 3];
        self.0.iter().all(|&s| s < 3 && !std::mem::replace(&mut seen[s], true))
    }
}

/// A contiguous run of code points used as one language's alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Script {
    pub code: &'static str,
    pub start: u32,
    pub len: u32,
}

/// Named scripts for seeds `1..=SCRIPTS.len()`.
pub const SCRIPTS: [Script; 9] = [
    Script { code: "deva", start: 0x0915, len: 37 },
    Script { code: "hang", start: 0xAC00, len: 40 },
    Script { code: "cyrl", start: 0x0430, len: 32 },
    Script { code: "grek", start: 0x03B1, len: 25 },
    Script { code: "armn", start: 0x0561, len: 38 },
    Script { code: "geor", start: 0x10D0, len: 33 },
    Script { code: "hebr", start: 0x05D0, len: 27 },
    Script { code: "thai", start: 0x0E01, len: 46 },
    Script { code: "kana", start: 0x30A2, len: 80 },
];

const CJK_START: u32 = 0x4E00;
const CJK_PARTITION: u32 = 48;
const CJK_PARTITIONS: u64 = (0x9FFF - 0x4E00) / 48;

/// Alphabet for a language seed. Seed 0 is the Latin pivot; seeds past the
/// named scripts get disjoint slices of the CJK block (wrapping after
/// `CJK_PARTITIONS` of them).
pub fn script_for_seed(seed: u64) -> Option<Script> {
    match seed {
        0 => None,
        s if s as usize <= SCRIPTS.len() => Some(SCRIPTS[s as usize - 1]),
        s => {
            let part = (s - SCRIPTS.len() as u64 - 1) % CJK_PARTITIONS;
            Some(Script {
                code: "hani",
                start: CJK_START + part as u32 * CJK_PARTITION,
                len: CJK_PARTITION,
            })
        }
    }
}

/// A synthetic language: a bijective lexicon over the concept vocabulary
/// plus a word-order rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lang_id: String,
    pub seed: u64,
    pub word_order: WordOrder,
    /// Concept symbol to surface word.
    pub lexicon: BTreeMap<String, String>,
    #[serde(skip)]
    reverse: BTreeMap<String, String>,
}

impl LanguageSpec {
    fn from_parts(lang_id: String, seed: u64, word_order: WordOrder, lexicon: BTreeMap<String, String>) -> Self {
        let reverse = lexicon.iter().map(|(k, v)| (v.clone(), k.clone())).collect();
        Self {
            lang_id,
            seed,
            word_order,
            lexicon,
            reverse,
        }
    }

    /// Rebuilds the reverse lexicon after deserialization and checks bijectivity.
    pub fn validated(self) -> Result<Self> {
        let spec = Self::from_parts(self.lang_id, self.seed, self.word_order, self.lexicon);
        if spec.reverse.len() != spec.lexicon.len() {
            return Err(Error::Config(format!(
                "lexicon of {} is not injective",
                spec.lang_id
            )));
        }
        if !spec.word_order.is_permutation() {
            return Err(Error::Config(format!(
                "word order {:?} of {} is not a permutation",
                spec.word_order, spec.lang_id
            )));
        }
        Ok(spec)
    }

    pub fn word(&self, symbol: &str) -> Result<&str> {
        self.lexicon.get(symbol).map(String::as_str).ok_or_else(|| {
            Error::Realization(format!("{symbol:?} missing from lexicon of {}", self.lang_id))
        })
    }

    pub fn symbol(&self, word: &str) -> Result<&str> {
        self.reverse.get(word).map(String::as_str).ok_or_else(|| {
            Error::Realization(format!("{word:?} is not a word of {}", self.lang_id))
        })
    }

    /// Orders three slot fillers and maps them to surface words.
    pub fn realize_slots(&self, slots: &[&str; 3]) -> Result<String> {
        let words: Vec<&str> = self
            .word_order
            .0
            .iter()
            .map(|&s| self.word(slots[s]))
            .collect::<Result<_>>()?;
        Ok(words.join(" "))
    }

    /// Inverse of [`realize_slots`](Self::realize_slots).
    pub fn invert_slots(&self, sentence: &str) -> Result<[String; 3]> {
        let words: Vec<&str> = sentence.split(' ').collect();
        if words.len() != 3 {
            return Err(Error::Realization(format!(
                "expected 3 words, got {} in {sentence:?}",
                words.len()
            )));
        }
        let mut slots: [String; 3] = Default::default();
        for (pos, &slot) in self.word_order.0.iter().enumerate() {
            slots[slot] = self.symbol(words[pos])?.to_string();
        }
        Ok(slots)
    }

    /// Characters of this language's script (`None` for the Latin pivot).
    pub fn script(&self) -> Option<Script> {
        script_for_seed(self.seed)
    }
}

/// Builds the language for `seed`. Seed 0 is the identity lexicon.
pub fn make_language(seed: u64, order: WordOrder) -> LanguageSpec {
    let vocab = concept_vocabulary();
    let Some(script) = script_for_seed(seed) else {
        let lexicon = vocab.iter().map(|s| (s.clone(), s.clone())).collect();
        return LanguageSpec::from_parts("en".into(), seed, order, lexicon);
    };
    let lang_id = if script.code == "hani" {
        format!("hani{seed}")
    } else {
        script.code.to_string()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 ^ seed);
    let mut used = HashSet::new();
    let mut lexicon = BTreeMap::new();
    for symbol in vocab {
        let word = loop {
            let len = rng.random_range(2..=4);
            let w: String = (0..len)
                .map(|_| {
                    let off = rng.random_range(0..script.len);
                    char::from_u32(script.start + off).expect("script ranges hold valid scalars")
                })
                .collect();
            if used.insert(w.clone()) {
                break w;
            }
        };
        lexicon.insert(symbol.clone(), word);
    }
    LanguageSpec::from_parts(lang_id, seed, order, lexicon)
}

/// Realizes a statement in a language.
pub fn realize(statement: &ConceptStatement, spec: &LanguageSpec) -> Result<String> {
    let s = &statement.slots;
    spec.realize_slots(&[&s[0], &s[1], &s[2]])
}

/// Recovers the statement a sentence of `spec` expresses.
pub fn invert(sentence: &str, spec: &LanguageSpec) -> Result<ConceptStatement> {
    let slots = spec.invert_slots(sentence)?;
    let template = if attribute_index(&slots[1]).is_some() {
        Template::Attribute
    } else if relation_index(&slots[1]).is_some() {
        Template::Relation
    } else {
        return Err(Error::Realization(format!(
            "{:?} is neither an attribute nor a relation",
            slots[1]
        )));
    };
    Ok(ConceptStatement::new(template, slots))
}
