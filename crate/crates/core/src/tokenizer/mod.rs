//! Byte-fallback BPE tokenizers: training, vocabulary merging, and
//! token-fertility measurement.

mod fertility;
mod merge;
mod model;
mod train;

pub use fertility::{fertility, FertilityReport, FertilityRow};
pub use merge::merge_vocabs;
pub use model::{
    byte_piece_name, pretokenize, Algorithm, Piece, TokenizerModel, BOS_ID, BYTE_OFFSET, EOS_ID,
    FIRST_LEARNED, PAD_ID, SPECIAL_TOKENS, TOKENIZER_VERSION, UNK_ID,
};
pub use train::{train, BYTE_ALPHABET};
