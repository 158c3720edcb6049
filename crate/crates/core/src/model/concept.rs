use std::sync::Arc;

use super::config::ModelConfig;
use super::layers::{embedding_init, rope_table, Attention, Norm, Packed};
use crate::error::Result;
use crate::moe::{ExpertMixtureLayer, SwiGlu};
use crate::numerics::{Graph, ParamId, ParamSink, ParamStore, RotaryTable, Var};

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(SwiGlu),
    Mixture(ExpertMixtureLayer),
}

#[derive(Clone, Debug)]
pub struct ConceptBlock {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub ffn: FeedForward,
}

/// Causal pre-norm transformer over concept vectors, with a token
/// embedding and tied output projection for language-model mode.
#[derive(Clone, Debug)]
pub struct ConceptModel {
    pub tok_emb: ParamId,
    pub blocks: Vec<ConceptBlock>,
    pub final_norm: Option<Norm>,
    rope: Arc<RotaryTable>,
}

/// Hidden states plus how many tokens each expert of each mixture layer saw.
#[derive(Clone, Debug)]
pub struct ConceptOutput {
    pub hidden: Var,
    pub expert_load: Vec<Vec<usize>>,
}

impl ConceptModel {
    pub fn new(sink: &mut impl ParamSink, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let tok_emb = sink.declare("concept.tok_emb".into(), &[cfg.vocab_size, d], embedding_init(d));
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("concept.layers.{l}");
                Ok(ConceptBlock {
                    ln1: Norm::new(sink, &format!("{p}.ln1"), d),
                    attn: Attention::new(sink, &format!("{p}.attn"), d, cfg.n_heads),
                    ln2: Norm::new(sink, &format!("{p}.ln2"), d),
                    ffn: if cfg.is_moe_layer(l) {
                        FeedForward::Mixture(ExpertMixtureLayer::new(sink, &format!("{p}.moe"), cfg.moe())?)
                    } else {
                        FeedForward::Dense(SwiGlu::new(sink, &format!("{p}.ffn"), d, cfg.ffn_dim))
                    },
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = (cfg.n_layers > 0).then(|| Norm::new(sink, "concept.ln_f", d));
        Ok(Self {
            tok_emb,
            blocks,
            final_norm,
            rope: rope_table(d, cfg.n_heads, cfg.context_window),
        })
    }

    /// Runs the block stack causally over packed concept vectors.
    pub fn transform(&self, g: &mut Graph, store: &ParamStore, x: Var, packed: &Packed) -> Result<ConceptOutput> {
        let mut h = x;
        let mut expert_load = Vec::new();
        for b in &self.blocks {
            let n = b.ln1.forward(g, store, h)?;
            let a = b.attn.self_attend(g, store, n, packed, true, &self.rope)?;
            h = g.add(h, a)?;
            let n = b.ln2.forward(g, store, h)?;
            let f = match &b.ffn {
                FeedForward::Dense(ffn) => ffn.forward(g, store, n)?,
                FeedForward::Mixture(moe) => {
                    let out = moe.forward(g, store, n)?;
                    expert_load.push(out.expert_load);
                    out.out
                }
            };
            h = g.add(h, f)?;
        }
        if let Some(norm) = &self.final_norm {
            h = norm.forward(g, store, h)?;
        }
        Ok(ConceptOutput { hidden: h, expert_load })
    }

    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let e = g.param(store, self.tok_emb);
        g.gather_rows(e, ids)
    }

    /// Tied projection of hidden rows onto the vocabulary.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let e = g.param(store, self.tok_emb);
        g.matmul_nt(hidden, e)
    }
}
