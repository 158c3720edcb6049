use std::collections::{BTreeMap, HashMap, HashSet};

use super::model::{
    pretokenize, Algorithm, TokenizerModel, BYTE_OFFSET, FIRST_LEARNED, SPECIAL_TOKENS,
};
use crate::error::{Error, Result};

/// Size of the byte alphabet every model starts from.
pub const BYTE_ALPHABET: usize = 256;

/// Trains a byte-fallback BPE model.
///
/// `target_vocab_size` counts byte tokens plus learned pieces; the four
/// special tokens come on top. Multi-byte characters seen in the corpus
/// are added first (most frequent first), then the most frequent adjacent
/// pair is merged until the budget is spent or no pair occurs twice.
/// Frequency ties go to the lexicographically smallest pair of byte strings.
pub fn train(corpus: &[String], target_vocab_size: usize, algorithm: Algorithm) -> Result<TokenizerModel> {
    let Algorithm::Bpe = algorithm;
    if corpus.is_empty() {
        return Err(Error::Config("tokenizer corpus is empty".into()));
    }
    if target_vocab_size <= BYTE_ALPHABET {
        return Err(Error::Config(format!(
            "target vocabulary {target_vocab_size} must exceed the byte alphabet of {BYTE_ALPHABET}"
        )));
    }
    let budget = target_vocab_size - BYTE_ALPHABET;

    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for doc in corpus {
        for chunk in pretokenize(doc) {
            *word_counts.entry(chunk).or_default() += 1;
        }
    }

    let mut char_counts: BTreeMap<char, u64> = BTreeMap::new();
    for (w, &n) in &word_counts {
        for c in w.chars().filter(|c| c.len_utf8() > 1) {
            *char_counts.entry(c).or_default() += n;
        }
    }
    let mut chars: Vec<(char, u64)> = char_counts.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut learned: Vec<String> = chars
        .iter()
        .take(budget)
        .map(|(c, _)| c.to_string())
        .collect();

    let model = TokenizerModel::from_learned(learned.clone(), true)?;
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let mut syms = Vec::new();
            model.initial_symbols(w, &mut syms);
            (syms, n)
        })
        .collect();

    let mut contents: Vec<Vec<u8>> = (0..model.vocab_size() as u32)
        .map(|id| model.content_of(id).to_vec())
        .collect();
    let mut lookup: HashMap<Vec<u8>, u32> = contents
        .iter()
        .enumerate()
        .skip(BYTE_OFFSET as usize)
        .map(|(i, c)| (c.clone(), i as u32))
        .collect();

    let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
    for (syms, n) in &words {
        for w in syms.windows(2) {
            if mergeable(w[0], w[1]) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
    }

    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    while learned.len() < budget {
        let candidates = pairs.iter().filter(|(p, &c)| c > 0 && !banned.contains(*p));
        let Some((&best, &count)) = candidates.max_by(|a, b| {
            a.1.cmp(b.1).then_with(|| {
                let ka = (&contents[a.0 .0 as usize], &contents[a.0 .1 as usize]);
                let kb = (&contents[b.0 .0 as usize], &contents[b.0 .1 as usize]);
                kb.cmp(&ka)
            })
        }) else {
            break;
        };
        if count < 2 {
            break;
        }
        let mut merged = contents[best.0 as usize].clone();
        merged.extend_from_slice(&contents[best.1 as usize]);
        let new_id = match lookup.get(&merged) {
            Some(&id) => id,
            None => {
                let s = String::from_utf8(merged.clone()).expect("merges join whole characters");
                if SPECIAL_TOKENS.contains(&s.as_str()) || is_byte_name(&s) {
                    banned.insert(best);
                    continue;
                }
                let id = FIRST_LEARNED + learned.len() as u32;
                learned.push(s);
                contents.push(merged.clone());
                lookup.insert(merged, id);
                id
            }
        };
        for (syms, n) in words.iter_mut() {
            if !syms.windows(2).any(|w| (w[0], w[1]) == best) {
                continue;
            }
            for w in syms.windows(2) {
                if mergeable(w[0], w[1]) {
                    *pairs.get_mut(&(w[0], w[1])).expect("pair counted") -= *n;
                }
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == best {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            for w in syms.windows(2) {
                if mergeable(w[0], w[1]) {
                    *pairs.entry((w[0], w[1])).or_default() += *n;
                }
            }
        }
        pairs.retain(|_, c| *c > 0);
    }

    TokenizerModel::from_learned(learned, true)
}

/// Pairs involving a lone non-ASCII byte would produce partial characters.
fn mergeable(a: u32, b: u32) -> bool {
    let partial = |id: u32| (BYTE_OFFSET + 0x80..FIRST_LEARNED).contains(&id);
    !partial(a) && !partial(b)
}

fn is_byte_name(s: &str) -> bool {
    s.len() == 6 && s.starts_with("<0x") && s.ends_with('>')
}
