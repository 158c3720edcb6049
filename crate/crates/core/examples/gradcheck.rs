//! Central finite differences against reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sutra::moe::{ExpertMixtureLayer, MoeConfig};
use sutra::numerics::check::{check_gradients, check_param_gradients};
use sutra::numerics::{Graph, Initializer, ParamStore, Tensor};
use sutra::training::alignment_loss;

fn main() -> sutra::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let inputs = [Tensor::randn(&[4, 6], 1.0, &mut rng), Tensor::randn(&[4, 6], 1.0, &mut rng)];
    let rep = check_gradients(&inputs, 1e-5, |g, v| Ok(alignment_loss(g, v[0], v[1], 0.5, 1.0)?.total))?;
    println!("alignment loss: max rel err {:.2e} over {} entries", rep.max_rel_err, rep.checked);

    let mut store = ParamStore::new();
    let cfg = MoeConfig {
        d_model: 6,
        ffn_dim: 8,
        n_experts: 4,
        top_k: 2,
    };
    let layer = ExpertMixtureLayer::new(&mut Initializer::new(&mut store, &mut rng), "moe", cfg)?;
    let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let rep = check_param_gradients(&mut store, 1e-5, 1, |g: &mut Graph, st| {
        let xv = g.constant(x.clone());
        let out = layer.forward(g, st, xv)?;
        let sq = g.mul(out.out, out.out)?;
        Ok(g.sum(sq))
    })?;
    println!("mixture layer: max rel err {:.2e} over {} entries", rep.max_rel_err, rep.checked);
    Ok(())
}
