//! The fixed, language-independent concept vocabulary.

use std::sync::OnceLock;

/// Attribute names with their value domains.
pub const ATTRIBUTES: [(&str, [&str; 6]); 24] = [
    ("color", ["red", "blue", "green", "yellow", "white", "black"]),
    ("size", ["tiny", "small", "medium", "large", "huge", "giant"]),
    ("shape", ["round", "square", "flat", "long", "curved", "pointed"]),
    ("taste", ["sweet", "sour", "bitter", "salty", "spicy", "bland"]),
    ("material", ["wood", "stone", "metal", "glass", "cloth", "paper"]),
    ("mood", ["happy", "sad", "calm", "angry", "proud", "shy"]),
    ("home", ["forest", "river", "mountain", "desert", "city", "island"]),
    ("age", ["newborn", "young", "adult", "old", "ancient", "ageless"]),
    ("sound", ["quiet", "loud", "soft", "sharp", "deep", "shrill"]),
    ("speed", ["slow", "quick", "steady", "swift", "idle", "rapid"]),
    ("weight", ["light", "heavy", "hollow", "dense", "airy", "solid"]),
    ("smell", ["fresh", "smoky", "musty", "floral", "earthy", "rotten"]),
    ("texture", ["smooth", "rough", "silky", "bumpy", "sticky", "fuzzy"]),
    ("food", ["bread", "fish", "rice", "fruit", "honey", "seeds"]),
    ("job", ["farmer", "singer", "baker", "hunter", "healer", "trader"]),
    ("season", ["spring", "summer", "autumn", "winter", "monsoon", "harvest"]),
    ("weather", ["sunny", "rainy", "windy", "snowy", "foggy", "stormy"]),
    ("tool", ["hammer", "needle", "ladder", "lamp", "knife", "drum"]),
    ("game", ["chess", "dice", "cards", "tag", "riddles", "marbles"]),
    ("pet", ["dog", "cat", "bird", "goat", "horse", "rabbit"]),
    ("drink", ["tea", "milk", "juice", "water", "cocoa", "broth"]),
    ("habit", ["early", "sleepy", "tidy", "messy", "punctual", "lazy"]),
    ("temper", ["patient", "restless", "gentle", "stern", "cheerful", "moody"]),
    ("voice", ["hoarse", "clear", "husky", "nasal", "booming", "whispery"]),
];

/// Relations between two entities.
pub const RELATIONS: [&str; 8] = ["likes", "fears", "knows", "helps", "trusts", "follows", "visits", "teaches"];

/// Placeholder for the asked-about slot of a question.
pub const QUESTION_WORD: &str = "what";

pub const ENTITY_COUNT: usize = 480;

/// Fact slots per entity: one per attribute and one per relation.
pub const SLOTS_PER_ENTITY: usize = ATTRIBUTES.len() + RELATIONS.len();

const CONSONANTS: [char; 14] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

fn syllable(i: usize) -> [char; 2] {
    [CONSONANTS[i / VOWELS.len()], VOWELS[i % VOWELS.len()]]
}

/// Entity names: two consonant-vowel syllables, unique by construction.
pub fn entities() -> &'static [String] {
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    NAMES.get_or_init(|| {
        let n_syl = CONSONANTS.len() * VOWELS.len();
        (0..ENTITY_COUNT)
            .map(|i| {
                let first = i % n_syl;
                let q = i / n_syl;
                let second = (q * 11 + first * 3) % n_syl;
                syllable(first).iter().chain(syllable(second).iter()).collect()
            })
            .collect()
    })
}

/// Every concept symbol, in a fixed order.
pub fn concept_vocabulary() -> &'static [String] {
    static VOCAB: OnceLock<Vec<String>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut v: Vec<String> = entities().to_vec();
        for (attr, values) in ATTRIBUTES {
            v.push(attr.to_string());
            v.extend(values.iter().map(|s| s.to_string()));
        }
        v.extend(RELATIONS.iter().map(|s| s.to_string()));
        v.push(QUESTION_WORD.to_string());
        v
    })
}

pub fn attribute_index(symbol: &str) -> Option<usize> {
    ATTRIBUTES.iter().position(|(a, _)| *a == symbol)
}

pub fn relation_index(symbol: &str) -> Option<usize> {
    RELATIONS.iter().position(|r| *r == symbol)
}

pub fn entity_index(symbol: &str) -> Option<usize> {
    entities().iter().position(|e| e == symbol)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn concept_symbols_are_unique() {
        let v = concept_vocabulary();
        let set: HashSet<&String> = v.iter().collect();
        assert_eq!(set.len(), v.len());
        assert_eq!(entities().len(), ENTITY_COUNT);
    }
}
