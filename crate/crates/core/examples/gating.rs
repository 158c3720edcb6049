//! Top-K gating on a hand-written logit vector, then routing a small batch
//! through a mixture layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sutra::moe::{top_k_gate, ExpertMixtureLayer, MoeConfig};
use sutra::numerics::{Graph, Initializer, ParamStore, Tensor};

fn main() -> sutra::Result<()> {
    let logits = [1.5, -0.3, 2.0, 1.5];
    for k in 1..=4 {
        let g = top_k_gate(&logits, k)?;
        println!("K={k} selected {:?} weights {:.4?}", g.selected, g.weights);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cfg = MoeConfig {
        d_model: 16,
        ffn_dim: 32,
        n_experts: 8,
        top_k: 2,
    };
    let layer = ExpertMixtureLayer::new(&mut Initializer::new(&mut store, &mut rng), "moe", cfg)?;
    let x = Tensor::randn(&[64, 16], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = layer.forward(&mut g, &store, xv)?;
    println!("output shape {:?}", g.shape(out.out));
    println!("tokens per expert {:?}", out.expert_load);
    Ok(())
}
