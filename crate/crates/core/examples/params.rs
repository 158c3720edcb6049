//! Total versus per-token active parameters.

use sutra::model::{count_params, ModelConfig};

fn main() -> sutra::Result<()> {
    for name in ["desk", "paper"] {
        let cfg = ModelConfig::named(name)?;
        println!("{name}: {} experts, top {}", cfg.n_experts, cfg.top_k);
        print!("{}", count_params(&cfg).to_table());
    }
    Ok(())
}
