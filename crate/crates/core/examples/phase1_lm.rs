//! Concept-model language modelling on pivot sentences.
//!
//! `cargo run --release --example phase1_lm -- 300`

use sutra::corpus::Split;
use sutra::eval::perplexity;
use sutra::recipes::{phase1_config, DeskWorld};
use sutra::training::train_phase1;

fn main() -> sutra::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let w = DeskWorld::build(2, 3000, 200, 3)?;
    let train = w.corpus.texts(w.pivot(), Split::Train);
    let valid = w.corpus.texts(w.pivot(), Split::Valid);
    let mut p = w.pipeline(0)?;
    println!("untrained valid perplexity {:.1}", perplexity(&p, &valid)?);
    let report = train_phase1(&phase1_config(steps), &train, &mut p, None)?;
    print!("{}", report.to_table(6));
    println!("trained valid perplexity {:.2}", perplexity(&p, &valid)?);
    Ok(())
}
