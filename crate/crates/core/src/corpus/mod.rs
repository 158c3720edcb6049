//! Synthetic multilingual world: a knowledge base of concept statements
//! rendered into languages with their own scripts and word orders.

mod concepts;
mod kb;
mod language;
mod parallel;
mod qa;

pub use concepts::{
    attribute_index, concept_vocabulary, entities, entity_index, relation_index, ATTRIBUTES,
    ENTITY_COUNT, QUESTION_WORD, RELATIONS, SLOTS_PER_ENTITY,
};
pub use kb::{generate_kb, ConceptStatement, Template, KB_CAPACITY};
pub use language::{invert, make_language, realize, script_for_seed, LanguageSpec, Script, WordOrder, SCRIPTS};
pub use parallel::{build_parallel_corpus, ParallelCorpus, ParallelItem, ParallelLine, Split};
pub use qa::{
    build_qa_corpus, guess_accuracy, qa_for_statements, read_qa_jsonl, write_qa_jsonl, QaItem,
    QaLine, N_OPTIONS,
};

/// Languages for seeds `0..n`, seed 0 being the Latin pivot.
pub fn make_languages(n: usize) -> Vec<LanguageSpec> {
    (0..n).map(|i| make_language(i as u64, WordOrder::nth(i))).collect()
}
