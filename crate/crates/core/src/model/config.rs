use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{MoeConfig, ParamCount, SwiGlu};
use crate::numerics::ShapeRecorder;

/// Shapes of the whole pipeline: concept model, encoder and decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub context_window: usize,
    pub vocab_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_heads: usize,
    pub dec_heads: usize,
    /// Every k-th concept layer uses a mixture; the others a dense FFN.
    pub moe_every_k_layers: usize,
    /// Rows of the language-id embedding tables.
    pub n_languages: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            n_experts: 4,
            top_k: 2,
            context_window: 128,
            vocab_size: 1024,
            enc_layers: 2,
            dec_layers: 2,
            enc_heads: 4,
            dec_heads: 4,
            moe_every_k_layers: 1,
            n_languages: 3,
            seed: 0,
        }
    }

    /// Published full-size shapes. Only used for parameter accounting.
    pub fn paper() -> Self {
        Self {
            d_model: 1024,
            n_layers: 32,
            n_heads: 32,
            ffn_dim: 14336,
            n_experts: 8,
            top_k: 2,
            context_window: 8192,
            vocab_size: 32000,
            enc_layers: 6,
            dec_layers: 6,
            enc_heads: 16,
            dec_heads: 16,
            moe_every_k_layers: 1,
            n_languages: 50,
            seed: 0,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown config {other:?}, expected desk or paper"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("context_window", self.context_window),
            ("vocab_size", self.vocab_size),
            ("enc_heads", self.enc_heads),
            ("dec_heads", self.dec_heads),
            ("moe_every_k_layers", self.moe_every_k_layers),
            ("n_languages", self.n_languages),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (what, heads) in [("n_heads", self.n_heads), ("enc_heads", self.enc_heads), ("dec_heads", self.dec_heads)] {
            if self.d_model % heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {what} {heads}",
                    self.d_model
                )));
            }
            if (self.d_model / heads) % 2 != 0 {
                return Err(Error::Config(format!(
                    "head width {} for {what} must be even for rotary embeddings",
                    self.d_model / heads
                )));
            }
        }
        self.moe().validate()
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            n_experts: self.n_experts,
            top_k: self.top_k,
        }
    }

    /// Whether concept layer `l` (0-based) is a mixture layer.
    pub fn is_moe_layer(&self, l: usize) -> bool {
        (l + 1) % self.moe_every_k_layers == 0
    }

    /// Every parameter tensor the pipeline declares, in creation order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let mut rec = ShapeRecorder::default();
        super::Modules::declare(&mut rec, self)?;
        Ok(rec.shapes)
    }
}

/// Per-module parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub concept: ParamCount,
    pub encoder: ParamCount,
    pub decoder: ParamCount,
    pub total: ParamCount,
}

/// Closed-form parameter counts. The concept model counts its tied
/// embedding once.
pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let d = cfg.d_model;
    let norm = 2 * d;
    let attn = 4 * d * d;
    let dense = SwiGlu::param_count(d, cfg.ffn_dim);
    let moe = crate::moe::count_params(&cfg.moe());
    let mut concept = ParamCount::shared(cfg.vocab_size * d);
    for l in 0..cfg.n_layers {
        concept = concept + ParamCount::shared(2 * norm + attn);
        concept = concept
            + if cfg.is_moe_layer(l) {
                moe
            } else {
                ParamCount::shared(dense)
            };
    }
    if cfg.n_layers > 0 {
        concept = concept + ParamCount::shared(norm);
    }
    let embeddings = (cfg.vocab_size + cfg.n_languages) * d;
    let encoder = ParamCount::shared(embeddings + cfg.enc_layers * (2 * norm + attn + dense) + norm);
    let decoder = ParamCount::shared(embeddings + cfg.dec_layers * (3 * norm + 2 * attn + dense) + norm);
    ParamReport {
        concept,
        encoder,
        decoder,
        total: concept + encoder + decoder,
    }
}

impl ParamReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>16} {:>16}\n", "module", "total", "active");
        for (name, c) in [
            ("concept", self.concept),
            ("encoder", self.encoder),
            ("decoder", self.decoder),
            ("all", self.total),
        ] {
            s.push_str(&format!("{name:<10} {:>16} {:>16}\n", c.total, c.active));
        }
        s
    }
}
