use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized format version of tokenizer files.
pub const TOKENIZER_VERSION: u32 = 1;

/// Pad, begin-of-sequence, end-of-sequence, unknown.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Id of the first byte token; byte `b` has id `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = SPECIAL_TOKENS.len() as u32;
/// Id of the first learned piece.
pub const FIRST_LEARNED: u32 = BYTE_OFFSET + 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bpe,
}

/// One vocabulary entry as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub piece: String,
    pub rank: u32,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    algorithm: Algorithm,
    byte_fallback: bool,
    pieces: Vec<Piece>,
    special_tokens: Vec<String>,
    version: u32,
}

/// Ordered subword vocabulary: special tokens, the 256 byte tokens, then
/// learned pieces in training order. A piece's rank is its id.
///
/// Encoding follows rank-ordered byte-pair semantics: starting from
/// characters (or their bytes when the character has no piece), the
/// adjacent pair whose concatenation is the lowest-ranked piece is merged
/// until no adjacent concatenation is in the vocabulary.
#[derive(Clone, Debug)]
pub struct TokenizerModel {
    algorithm: Algorithm,
    byte_fallback: bool,
    learned: Vec<String>,
    content_to_id: HashMap<Vec<u8>, u32>,
    merges: HashMap<(u32, u32), u32>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.algorithm == other.algorithm
            && self.byte_fallback == other.byte_fallback
            && self.learned == other.learned
    }
}

impl Eq for TokenizerModel {}

/// Display string of a byte token.
pub fn byte_piece_name(b: u8) -> String {
    if b.is_ascii() {
        (b as char).to_string()
    } else {
        format!("<0x{b:02X}>")
    }
}

impl TokenizerModel {
    /// Builds a model from learned piece strings in rank order.
    pub fn from_learned(learned: Vec<String>, byte_fallback: bool) -> Result<Self> {
        let mut content_to_id = HashMap::new();
        let mut names: HashMap<String, u32> = HashMap::new();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            names.insert(s.to_string(), i as u32);
        }
        for b in 0..=255u8 {
            let id = BYTE_OFFSET + b as u32;
            content_to_id.insert(vec![b], id);
            names.insert(byte_piece_name(b), id);
        }
        for (i, p) in learned.iter().enumerate() {
            let id = FIRST_LEARNED + i as u32;
            if p.is_empty() {
                return Err(Error::Config(format!("empty piece at rank {id}")));
            }
            if p.len() == 1 {
                return Err(Error::Config(format!(
                    "learned piece {p:?} duplicates a byte token"
                )));
            }
            if names.insert(p.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate piece {p:?} at rank {id}")));
            }
            content_to_id.insert(p.as_bytes().to_vec(), id);
        }
        let mut merges = HashMap::new();
        for (i, p) in learned.iter().enumerate() {
            let id = FIRST_LEARNED + i as u32;
            let bytes = p.as_bytes();
            for k in 1..bytes.len() {
                if let (Some(&l), Some(&r)) = (
                    content_to_id.get(&bytes[..k]),
                    content_to_id.get(&bytes[k..]),
                ) {
                    merges.insert((l, r), id);
                }
            }
        }
        Ok(Self {
            algorithm: Algorithm::Bpe,
            byte_fallback,
            learned,
            content_to_id,
            merges,
        })
    }

    /// A model with no learned pieces: pure byte-level encoding.
    pub fn bytes_only() -> Self {
        Self::from_learned(Vec::new(), true).expect("empty vocabulary is valid")
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn byte_fallback(&self) -> bool {
        self.byte_fallback
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_LEARNED as usize + self.learned.len()
    }

    pub fn learned_pieces(&self) -> &[String] {
        &self.learned
    }

    /// Display string of piece `id`.
    pub fn piece(&self, id: u32) -> Option<String> {
        match id {
            i if i < BYTE_OFFSET => Some(SPECIAL_TOKENS[i as usize].to_string()),
            i if i < FIRST_LEARNED => Some(byte_piece_name((i - BYTE_OFFSET) as u8)),
            i => self.learned.get((i - FIRST_LEARNED) as usize).cloned(),
        }
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        if let Some(i) = SPECIAL_TOKENS.iter().position(|s| *s == piece) {
            return Some(i as u32);
        }
        self.content_to_id.get(piece.as_bytes()).copied()
    }

    pub fn pieces(&self) -> Vec<Piece> {
        (0..self.vocab_size() as u32)
            .map(|id| Piece {
                piece: self.piece(id).expect("id in range"),
                rank: id,
            })
            .collect()
    }

    fn content(&self, id: u32) -> &[u8] {
        match id {
            i if i < BYTE_OFFSET => &[],
            i if i < FIRST_LEARNED => {
                let b = (i - BYTE_OFFSET) as usize;
                &ALL_BYTES[b..b + 1]
            }
            i => self.learned[(i - FIRST_LEARNED) as usize].as_bytes(),
        }
    }

    /// Initial symbols of a chunk: a piece per character when one exists,
    /// otherwise the character's bytes.
    pub(crate) fn initial_symbols(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut buf = [0u8; 4];
        for c in chunk.chars() {
            let bytes = c.encode_utf8(&mut buf).as_bytes();
            match self.content_to_id.get(bytes) {
                Some(&id) => out.push(id),
                None if self.byte_fallback => {
                    out.extend(bytes.iter().map(|&b| BYTE_OFFSET + b as u32))
                }
                None => out.push(UNK_ID),
            }
        }
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms = Vec::with_capacity(chunk.len());
        self.initial_symbols(chunk, &mut syms);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.get(&(w[0], w[1])).map(|&id| (id, i)))
                .min();
            match best {
                Some((id, i)) => {
                    syms[i] = id;
                    syms.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(syms);
    }

    /// Text to token ids. Lossless with byte fallback enabled.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// Token ids back to text; special tokens contribute nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(Error::Index(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.vocab_size()
                )));
            }
            bytes.extend_from_slice(self.content(id));
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Sorted-key JSON, byte-identical for identical models.
    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            algorithm: self.algorithm,
            byte_fallback: self.byte_fallback,
            pieces: self.pieces(),
            special_tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            version: TOKENIZER_VERSION,
        };
        let value = serde_json::to_value(&file).expect("tokenizer serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        if file.version != TOKENIZER_VERSION {
            return Err(Error::Config(format!(
                "tokenizer version {} unsupported (expected {TOKENIZER_VERSION})",
                file.version
            )));
        }
        if file.special_tokens != SPECIAL_TOKENS {
            return Err(Error::Config(format!(
                "special tokens {:?} differ from {SPECIAL_TOKENS:?}",
                file.special_tokens
            )));
        }
        for (i, p) in file.pieces.iter().enumerate() {
            if p.rank as usize != i {
                return Err(Error::Config(format!(
                    "piece {:?} has rank {} at position {i}",
                    p.piece, p.rank
                )));
            }
        }
        if file.pieces.len() < FIRST_LEARNED as usize {
            return Err(Error::Config("tokenizer file lacks byte pieces".into()));
        }
        for (i, p) in file.pieces[..FIRST_LEARNED as usize].iter().enumerate() {
            let expect = if i < BYTE_OFFSET as usize {
                SPECIAL_TOKENS[i].to_string()
            } else {
                byte_piece_name((i - BYTE_OFFSET as usize) as u8)
            };
            if p.piece != expect {
                return Err(Error::Config(format!(
                    "piece at rank {i} is {:?}, expected {expect:?}",
                    p.piece
                )));
            }
        }
        let learned = file.pieces[FIRST_LEARNED as usize..]
            .iter()
            .map(|p| p.piece.clone())
            .collect();
        Self::from_learned(learned, file.byte_fallback)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub(crate) fn content_of(&self, id: u32) -> &[u8] {
        self.content(id)
    }
}

static ALL_BYTES: [u8; 256] = {
    let mut a = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        a[i] = i as u8;
        i += 1;
    }
    a
};

/// Splits text into chunks of (leading whitespace, non-whitespace run).
/// Concatenating the chunks gives back the input.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && in_word {
            chunks.push(&text[start..i]);
            start = i;
            in_word = false;
        } else if !ws {
            in_word = true;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}
