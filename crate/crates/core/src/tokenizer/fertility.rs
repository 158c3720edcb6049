use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::model::TokenizerModel;

/// Token and word counts for one language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FertilityRow {
    pub lang: String,
    pub tokens: usize,
    pub words: usize,
    /// Tokens per whitespace-delimited word; `None` when the language had
    /// no words to measure.
    pub fertility: Option<f64>,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FertilityReport {
    pub reference: String,
    pub rows: Vec<FertilityRow>,
}

impl FertilityReport {
    pub fn row(&self, lang: &str) -> Option<&FertilityRow> {
        self.rows.iter().find(|r| r.lang == lang)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("fertility ({})\n", self.reference);
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10}", "lang", "tokens", "words", "tok/word");
        for r in &self.rows {
            let f = match r.fertility {
                Some(f) => format!("{f:.4}"),
                None => "EMPTY".to_string(),
            };
            let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10}", r.lang, r.tokens, r.words, f);
        }
        s
    }
}

/// Measures tokens per whitespace-delimited word for each language.
pub fn fertility(
    model: &TokenizerModel,
    texts_by_lang: &[(String, Vec<String>)],
    reference: &str,
) -> FertilityReport {
    let rows = texts_by_lang
        .iter()
        .map(|(lang, texts)| {
            let tokens: usize = texts.iter().map(|t| model.encode(t).len()).sum();
            let words: usize = texts.iter().map(|t| t.split_whitespace().count()).sum();
            FertilityRow {
                lang: lang.clone(),
                tokens,
                words,
                fertility: (words > 0).then(|| tokens as f64 / words as f64),
                empty: words == 0,
            }
        })
        .collect();
    FertilityReport {
        reference: reference.to_string(),
        rows,
    }
}
