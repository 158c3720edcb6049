use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, Graph, Init, ParamId, ParamSink, ParamStore, RotaryTable, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// Sequences packed one after another into the rows of a matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub lengths: Vec<usize>,
    pub positions: Arc<Vec<usize>>,
}

impl Packed {
    pub fn new(lengths: Vec<usize>) -> Self {
        let positions = lengths.iter().flat_map(|&l| 0..l).collect();
        Self {
            lengths,
            positions: Arc::new(positions),
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    /// `(start, len)` of every sequence.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.lengths
            .iter()
            .map(|&l| {
                let s = (start, l);
                start += l;
                s
            })
            .collect()
    }

    /// Row index of the last element of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments().iter().map(|(s, l)| s + l - 1).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(sink: &mut impl ParamSink, prefix: &str, d: usize) -> Self {
        Self {
            gain: sink.declare(format!("{prefix}.gain"), &[d], Init::Const(1.0)),
            bias: sink.declare(format!("{prefix}.bias"), &[d], Init::Const(0.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias, NORM_EPS)
    }
}

/// Projections of one multi-head attention sublayer.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl Attention {
    pub fn new(sink: &mut impl ParamSink, prefix: &str, d: usize, heads: usize) -> Self {
        let init = Init::Normal((d as f64).powf(-0.5));
        let mut w = |n: &str| sink.declare(format!("{prefix}.{n}"), &[d, d], init);
        Self {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
            heads,
        }
    }

    /// Self-attention with rotary positions on queries and keys.
    pub fn self_attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        packed: &Packed,
        causal: bool,
        rope: &Arc<RotaryTable>,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = self.bind(g, store);
        let q = g.matmul(x, wq)?;
        let q = g.rotary(q, self.heads, rope.clone(), packed.positions.clone())?;
        let k = g.matmul(x, wk)?;
        let k = g.rotary(k, self.heads, rope.clone(), packed.positions.clone())?;
        let v = g.matmul(x, wv)?;
        let layout = Arc::new(AttnLayout::self_attention(&packed.lengths, self.heads, causal));
        let a = g.attention(q, k, v, layout)?;
        g.matmul(a, wo)
    }

    /// Queries from `x`, keys and values from `memory`.
    pub fn cross_attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        packed: &Packed,
        memory: Var,
        mem: &Packed,
    ) -> Result<Var> {
        if packed.lengths.len() != mem.lengths.len() {
            return Err(Error::Shape(format!(
                "{} target sequences for {} sources",
                packed.lengths.len(),
                mem.lengths.len()
            )));
        }
        let (wq, wk, wv, wo) = self.bind(g, store);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let layout = Arc::new(AttnLayout::cross_attention(&packed.lengths, &mem.lengths, self.heads));
        let a = g.attention(q, k, v, layout)?;
        g.matmul(a, wo)
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> (Var, Var, Var, Var) {
        (
            g.param(store, self.wq),
            g.param(store, self.wk),
            g.param(store, self.wv),
            g.param(store, self.wo),
        )
    }
}

pub(crate) fn rope_table(d: usize, heads: usize, context: usize) -> Arc<RotaryTable> {
    Arc::new(RotaryTable::new(d / heads, context, ROPE_BASE))
}

/// Embedding std so tied output logits start near unit scale.
pub(crate) fn embedding_init(d: usize) -> Init {
    Init::Normal((d as f64).powf(-0.5))
}
