//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes   "SUTRACKP"
//! version      u32 LE    CHECKPOINT_VERSION
//! header_len   u64 LE
//! header       JSON      {config, langs, phases_completed, tensors: [{name, shape}], tokenizer, version}
//! tensors      f64 LE    row-major data of each tensor, in header order
//! digest       32 bytes  SHA-256 of everything above
//! ```
//!
//! The header is serialized with sorted keys and tensors appear in
//! declaration order, so saving the same pipeline twice gives identical
//! files.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::pipeline::SutraPipeline;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizer::TokenizerModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SUTRACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    langs: Vec<String>,
    phases_completed: BTreeSet<u8>,
    tensors: Vec<TensorEntry>,
    tokenizer: String,
    version: u32,
}

/// Serializes the pipeline into checkpoint bytes.
pub fn checkpoint_bytes(p: &SutraPipeline) -> Result<Vec<u8>> {
    let header = Header {
        config: p.config.clone(),
        langs: p.langs.clone(),
        phases_completed: p.phases_completed.clone(),
        tensors: p
            .store
            .ids()
            .map(|id| TensorEntry {
                name: p.store.name(id).to_string(),
                shape: p.store.value(id).shape().to_vec(),
            })
            .collect(),
        tokenizer: p.tokenizer.to_json(),
        version: CHECKPOINT_VERSION,
    };
    // Round-trip through Value so object keys come out sorted.
    let header = serde_json::to_vec(&serde_json::to_value(&header)?)?;
    let mut out = Vec::with_capacity(header.len() + 8 * p.store.numel() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for id in p.store.ids() {
        let t = p.store.value(id);
        t.check_finite(p.store.name(id))?;
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(p: &SutraPipeline, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(p)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::checkpoint(
                what,
                format!("{n} more bytes"),
                format!("{}", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses checkpoint bytes into a pipeline.
pub fn pipeline_from_bytes(bytes: &[u8]) -> Result<SutraPipeline> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::checkpoint("file size", "at least 52 bytes", bytes.len()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(
            "magic",
            String::from_utf8_lossy(CHECKPOINT_MAGIC),
            String::from_utf8_lossy(magic),
        ));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint("format version", CHECKPOINT_VERSION, version));
    }
    let actual = Sha256::digest(body);
    if actual.as_slice() != digest {
        return Err(Error::checkpoint("digest", hex::encode(digest), hex::encode(actual)));
    }
    let header_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint("header version", CHECKPOINT_VERSION, header.version));
    }
    let tokenizer = TokenizerModel::from_json(&header.tokenizer)?;
    let mut p = SutraPipeline::new(header.config, tokenizer, header.langs)?;
    p.phases_completed = header.phases_completed;
    if header.tensors.len() != p.store.len() {
        return Err(Error::checkpoint("tensor count", p.store.len(), header.tensors.len()));
    }
    for (id, entry) in p.store.ids().collect::<Vec<_>>().into_iter().zip(&header.tensors) {
        if p.store.name(id) != entry.name {
            return Err(Error::checkpoint("tensor name", p.store.name(id), &entry.name));
        }
        let n: usize = entry.shape.iter().product();
        let raw = r.take(8 * n, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)?;
        p.store.load_value(&entry.name, t)?;
    }
    if r.pos != body.len() {
        return Err(Error::checkpoint("trailing bytes", 0, body.len() - r.pos));
    }
    Ok(p)
}

pub fn load_checkpoint(path: &Path) -> Result<SutraPipeline> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    pipeline_from_bytes(&bytes)
}

/// Loads a checkpoint and checks that its shapes match `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<SutraPipeline> {
    let p = load_checkpoint(path)?;
    check_config(expected, &p.config)?;
    Ok(p)
}

/// First differing shape field between two configs, as a checkpoint error.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let (e, f) = (serde_json::to_value(expected)?, serde_json::to_value(found)?);
    let (e, f) = (e.as_object().expect("struct"), f.as_object().expect("struct"));
    for (k, ev) in e {
        if k == "seed" {
            continue;
        }
        if f.get(k) != Some(ev) {
            return Err(Error::checkpoint(
                k.clone(),
                ev,
                f.get(k).map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
    }
    Ok(())
}
