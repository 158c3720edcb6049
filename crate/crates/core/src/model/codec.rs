use std::sync::Arc;

use super::config::ModelConfig;
use super::layers::{embedding_init, rope_table, Attention, Norm, Packed};
use crate::error::{Error, Result};
use crate::moe::SwiGlu;
use crate::numerics::{Graph, ParamId, ParamSink, ParamStore, RotaryTable, Tensor, Var};

/// Fixed sinusoidal position code scaled to unit norm per row.
fn position_code(pos: usize, d: usize, out: &mut [f64]) {
    let scale = (2.0 / d as f64).sqrt();
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = scale * angle.sin();
        out[2 * i + 1] = scale * angle.cos();
    }
}

/// Token embedding plus language embedding plus absolute position for
/// every packed row. Cross-attention has no other source of position.
fn embed_with_language(
    g: &mut Graph,
    store: &ParamStore,
    tok_emb: ParamId,
    lang_emb: ParamId,
    seqs: &[(&[u32], usize)],
) -> Result<Var> {
    let n_langs = store.value(lang_emb).shape()[0];
    let mut tok_idx = Vec::new();
    let mut lang_idx = Vec::new();
    for &(ids, lang) in seqs {
        if lang >= n_langs {
            return Err(Error::Config(format!(
                "language index {lang} outside the {n_langs} trained languages"
            )));
        }
        tok_idx.extend(ids.iter().map(|&i| i as usize));
        lang_idx.extend(std::iter::repeat_n(lang, ids.len()));
    }
    let te = g.param(store, tok_emb);
    let le = g.param(store, lang_emb);
    let t = g.gather_rows(te, &tok_idx)?;
    let l = g.gather_rows(le, &lang_idx)?;
    let d = store.value(tok_emb).shape()[1];
    let mut pe = vec![0.0; tok_idx.len() * d];
    let mut row = 0;
    for &(ids, _) in seqs {
        for pos in 0..ids.len() {
            position_code(pos, d, &mut pe[row * d..(row + 1) * d]);
            row += 1;
        }
    }
    let pe = g.constant(Tensor::new(vec![tok_idx.len(), d], pe)?);
    let tl = g.add(t, l)?;
    g.add(tl, pe)
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub ffn: SwiGlu,
}

/// Bidirectional transformer from language tokens to concept vectors.
#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub tok_emb: ParamId,
    pub lang_emb: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: Norm,
    rope: Arc<RotaryTable>,
}

impl LanguageEncoder {
    pub fn new(sink: &mut impl ParamSink, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let tok_emb = sink.declare("encoder.tok_emb".into(), &[cfg.vocab_size, d], embedding_init(d));
        let lang_emb = sink.declare("encoder.lang_emb".into(), &[cfg.n_languages, d], embedding_init(d));
        let blocks = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("encoder.layers.{l}");
                EncoderBlock {
                    ln1: Norm::new(sink, &format!("{p}.ln1"), d),
                    attn: Attention::new(sink, &format!("{p}.attn"), d, cfg.enc_heads),
                    ln2: Norm::new(sink, &format!("{p}.ln2"), d),
                    ffn: SwiGlu::new(sink, &format!("{p}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        Self {
            tok_emb,
            lang_emb,
            blocks,
            final_norm: Norm::new(sink, "encoder.ln_f", d),
            rope: rope_table(d, cfg.enc_heads, cfg.context_window),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seqs: &[(&[u32], usize)], packed: &Packed) -> Result<Var> {
        let mut h = embed_with_language(g, store, self.tok_emb, self.lang_emb, seqs)?;
        for b in &self.blocks {
            let n = b.ln1.forward(g, store, h)?;
            let a = b.attn.self_attend(g, store, n, packed, false, &self.rope)?;
            h = g.add(h, a)?;
            let n = b.ln2.forward(g, store, h)?;
            let f = b.ffn.forward(g, store, n)?;
            h = g.add(h, f)?;
        }
        self.final_norm.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: Norm,
    pub self_attn: Attention,
    pub ln2: Norm,
    pub cross_attn: Attention,
    pub ln3: Norm,
    pub ffn: SwiGlu,
}

/// Causal transformer that reads concept vectors through cross-attention
/// and predicts tokens of the target language.
#[derive(Clone, Debug)]
pub struct LanguageDecoder {
    pub tok_emb: ParamId,
    pub lang_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: Norm,
    rope: Arc<RotaryTable>,
}

impl LanguageDecoder {
    pub fn new(sink: &mut impl ParamSink, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let tok_emb = sink.declare("decoder.tok_emb".into(), &[cfg.vocab_size, d], embedding_init(d));
        let lang_emb = sink.declare("decoder.lang_emb".into(), &[cfg.n_languages, d], embedding_init(d));
        let blocks = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("decoder.layers.{l}");
                DecoderBlock {
                    ln1: Norm::new(sink, &format!("{p}.ln1"), d),
                    self_attn: Attention::new(sink, &format!("{p}.self_attn"), d, cfg.dec_heads),
                    ln2: Norm::new(sink, &format!("{p}.ln2"), d),
                    cross_attn: Attention::new(sink, &format!("{p}.cross_attn"), d, cfg.dec_heads),
                    ln3: Norm::new(sink, &format!("{p}.ln3"), d),
                    ffn: SwiGlu::new(sink, &format!("{p}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        Self {
            tok_emb,
            lang_emb,
            blocks,
            final_norm: Norm::new(sink, "decoder.ln_f", d),
            rope: rope_table(d, cfg.dec_heads, cfg.context_window),
        }
    }

    /// Final hidden rows for every packed target position.
    pub fn hidden(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seqs: &[(&[u32], usize)],
        packed: &Packed,
        memory: Var,
        mem: &Packed,
    ) -> Result<Var> {
        let mut h = embed_with_language(g, store, self.tok_emb, self.lang_emb, seqs)?;
        for b in &self.blocks {
            let n = b.ln1.forward(g, store, h)?;
            let a = b.self_attn.self_attend(g, store, n, packed, true, &self.rope)?;
            h = g.add(h, a)?;
            let n = b.ln2.forward(g, store, h)?;
            let c = b.cross_attn.cross_attend(g, store, n, packed, memory, mem)?;
            h = g.add(h, c)?;
            let n = b.ln3.forward(g, store, h)?;
            let f = b.ffn.forward(g, store, n)?;
            h = g.add(h, f)?;
        }
        self.final_norm.forward(g, store, h)
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let e = g.param(store, self.tok_emb);
        g.matmul_nt(hidden, e)
    }
}
