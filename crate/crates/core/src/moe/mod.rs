//! Top-K gated mixture of SwiGLU experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParamSink, ParamStore, Var};

/// Gated feed-forward block `(silu(x W_gate) * (x W_up)) W_down`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

impl SwiGlu {
    pub fn new(sink: &mut impl ParamSink, prefix: &str, d: usize, ffn: usize) -> Self {
        let s_in = Init::Normal((d as f64).powf(-0.5));
        let s_out = Init::Normal((ffn as f64).powf(-0.5));
        Self {
            w_gate: sink.declare(format!("{prefix}.w_gate"), &[d, ffn], s_in),
            w_up: sink.declare(format!("{prefix}.w_up"), &[d, ffn], s_in),
            w_down: sink.declare(format!("{prefix}.w_down"), &[ffn, d], s_out),
        }
    }

    pub fn param_count(d: usize, ffn: usize) -> usize {
        3 * d * ffn
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (wg, wu, wd) = (g.param(store, self.w_gate), g.param(store, self.w_up), g.param(store, self.w_down));
        let a = g.matmul(x, wg)?;
        let a = g.silu(a);
        let b = g.matmul(x, wu)?;
        let h = g.mul(a, b)?;
        g.matmul(h, wd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("expert widths must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k must lie in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        Ok(())
    }

    pub fn expert_params(&self) -> usize {
        SwiGlu::param_count(self.d_model, self.ffn_dim)
    }

    pub fn gate_params(&self) -> usize {
        self.d_model * self.n_experts
    }
}

/// Total and per-token active parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub active: usize,
}

impl std::ops::Add for ParamCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            total: self.total + o.total,
            active: self.active + o.active,
        }
    }
}

impl ParamCount {
    /// Parameters every token touches.
    pub fn shared(n: usize) -> Self {
        Self { total: n, active: n }
    }
}

pub fn count_params(cfg: &MoeConfig) -> ParamCount {
    ParamCount {
        total: cfg.gate_params() + cfg.n_experts * cfg.expert_params(),
        active: cfg.gate_params() + cfg.top_k * cfg.expert_params(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub logits: Vec<f64>,
    /// Chosen experts, highest logit first.
    pub selected: Vec<usize>,
    /// Softmax over the selected logits; zero elsewhere.
    pub weights: Vec<f64>,
}

/// Indices of the `k` largest values, ties to the lower index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    // `partial_cmp` so that -0.0 and 0.0 tie.
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Keeps the top `k` logits, sets the rest to `-inf` and normalizes.
pub fn top_k_gate(logits: &[f64], k: usize) -> Result<GateOutput> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top_k {k} for {} experts", logits.len())));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gate logit {i} is {}", logits[i])));
    }
    let selected = top_k_indices(logits, k);
    let max = logits[selected[0]];
    let mut weights = vec![0.0; logits.len()];
    let mut z = 0.0;
    for &i in &selected {
        weights[i] = (logits[i] - max).exp();
        z += weights[i];
    }
    weights.iter_mut().for_each(|w| *w /= z);
    Ok(GateOutput {
        logits: logits.to_vec(),
        selected,
        weights,
    })
}

/// Result of routing a batch of tokens.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub out: Var,
    pub gates: Vec<GateOutput>,
    /// Tokens routed to each expert.
    pub expert_load: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ExpertMixtureLayer {
    pub config: MoeConfig,
    pub gate_weights: ParamId,
    pub experts: Vec<SwiGlu>,
}

impl ExpertMixtureLayer {
    pub fn new(sink: &mut impl ParamSink, prefix: &str, config: MoeConfig) -> Result<Self> {
        config.validate()?;
        let gate_weights = sink.declare(
            format!("{prefix}.gate"),
            &[config.d_model, config.n_experts],
            Init::Normal((config.d_model as f64).powf(-0.5)),
        );
        let experts = (0..config.n_experts)
            .map(|j| SwiGlu::new(sink, &format!("{prefix}.experts.{j}"), config.d_model, config.ffn_dim))
            .collect();
        Ok(Self {
            config,
            gate_weights,
            experts,
        })
    }

    /// Gate decision for a single token vector.
    pub fn gate(&self, store: &ParamStore, x: &[f64]) -> Result<GateOutput> {
        let (d, n) = (self.config.d_model, self.config.n_experts);
        if x.len() != d {
            return Err(Error::Shape(format!("gate input has {} entries, expected {d}", x.len())));
        }
        let w = store.value(self.gate_weights).data();
        let mut logits = vec![0.0; n];
        for (i, xi) in x.iter().enumerate() {
            for (l, wij) in logits.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *l += xi * wij;
            }
        }
        top_k_gate(&logits, self.config.top_k)
    }

    /// Routes each row of `x` (`[tokens, d_model]`) through its top-K
    /// experts. Unselected experts are never evaluated.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<MoeOutput> {
        let cfg = self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != cfg.d_model {
            return Err(Error::Shape(format!(
                "mixture input {shape:?}, expected [tokens, {}]",
                cfg.d_model
            )));
        }
        if let Some(i) = g.value(x).data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "mixture input at token {} is not finite",
                i / cfg.d_model
            )));
        }
        let tokens = shape[0];
        let n = cfg.n_experts;
        let wg = g.param(store, self.gate_weights);
        let logits = g.matmul(x, wg)?;
        let gates = g
            .value(logits)
            .data()
            .chunks(n)
            .enumerate()
            .map(|(t, row)| {
                top_k_gate(row, cfg.top_k).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("token {t}: {m}")),
                    e => e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut keep = vec![false; tokens * n];
        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (t, gate) in gates.iter().enumerate() {
            for &j in &gate.selected {
                keep[t * n + j] = true;
                routed[j].push(t);
            }
        }
        let masked = g.mask_fill_neg_inf(logits, keep)?;
        let weights = g.softmax(masked, 1)?;
        let mut out: Option<Var> = None;
        for (j, toks) in routed.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let xj = g.gather_rows(x, toks)?;
            let h = self.experts[j].forward(g, store, xj)?;
            if let Some(i) = g.value(h).data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "expert {j} output at token {}",
                    toks[i / cfg.d_model]
                )));
            }
            let flat: Vec<usize> = toks.iter().map(|&t| t * n + j).collect();
            let wj = g.pick(weights, &flat)?;
            let scaled = g.scale_rows(h, wj)?;
            let back = g.scatter_add_rows(scaled, toks, tokens)?;
            out = Some(match out {
                Some(acc) => g.add(acc, back)?,
                None => back,
            });
        }
        Ok(MoeOutput {
            out: out.expect("every token selects at least one expert"),
            expert_load: routed.iter().map(Vec::len).collect(),
            gates,
        })
    }
}
