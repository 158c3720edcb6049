use std::collections::HashSet;

use super::model::TokenizerModel;
use crate::error::{Error, Result};

/// Extends `base` with every learned piece of `extension` it lacks.
///
/// Base pieces keep their ranks; new pieces follow in the extension's own
/// order, so base-language segmentation is unchanged wherever no extension
/// piece applies.
pub fn merge_vocabs(base: &TokenizerModel, extension: &TokenizerModel) -> Result<TokenizerModel> {
    if base.algorithm() != extension.algorithm() {
        return Err(Error::Config(format!(
            "cannot merge {:?} with {:?} tokenizer",
            base.algorithm(),
            extension.algorithm()
        )));
    }
    if base.byte_fallback() != extension.byte_fallback() {
        return Err(Error::Config(
            "base and extension disagree on byte fallback".into(),
        ));
    }
    let mut seen: HashSet<&str> = base.learned_pieces().iter().map(String::as_str).collect();
    let mut learned = base.learned_pieces().to_vec();
    for p in extension.learned_pieces() {
        if seen.insert(p) {
            learned.push(p.clone());
        }
    }
    TokenizerModel::from_learned(learned, base.byte_fallback())
}
