//! All three phases on a small world, then per-language QA accuracy.
//!
//! `cargo run --release --example consistency -- 200 1500 500`

use sutra::corpus::Split;
use sutra::eval::consistency_eval;
use sutra::recipes::{self, phase1_config, phase2_config, phase3_config, DeskWorld};
use sutra::training::{train_phase1, train_phase2, train_phase3};

fn main() -> sutra::Result<()> {
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (s1, s2, s3) = (arg(1, 200), arg(2, 1500), arg(3, 500));
    let w = DeskWorld::build(3, 1500, 100, 5)?;
    let mut p = w.pipeline(0)?;
    train_phase1(&phase1_config(s1), &w.corpus.texts(w.pivot(), Split::Train), &mut p, None)?;
    train_phase2(&phase2_config(s2), &w.corpus, &mut p, None)?;
    let (train_items, eval_items) = w.qa_sets(100, recipes::QA_RENDERINGS, 1)?;
    train_phase3(&phase3_config(s3), &train_items, &mut p, None)?;
    let langs: Vec<&str> = w.corpus.langs.iter().map(String::as_str).collect();
    print!("{}", consistency_eval(&p, &eval_items, &langs)?.to_table());
    Ok(())
}
