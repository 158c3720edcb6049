//! Codec training with translation and alignment losses, then cross-lingual
//! retrieval and a few translations on held-out pairs.
//!
//! `cargo run --release --example alignment -- 2000`

use sutra::corpus::Split;
use sutra::eval::alignment_report;
use sutra::recipes::{phase2_config, DeskWorld};
use sutra::training::train_phase2;

fn main() -> sutra::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let w = DeskWorld::build(3, 2000, 100, 7)?;
    let mut p = w.pipeline(0)?;
    print!("{}", alignment_report(&p, &w.corpus, Split::Test)?.to_table());
    let report = train_phase2(&phase2_config(steps), &w.corpus, &mut p, None)?;
    print!("{}", report.to_table(6));
    print!("{}", alignment_report(&p, &w.corpus, Split::Test)?.to_table());
    for item in w.corpus.split(Split::Test).take(3) {
        let src = &item.texts[w.pivot()];
        for l in &w.corpus.langs[1..] {
            println!("{src} -> {} (reference {})", p.generate(src, w.pivot(), l, 12)?, item.texts[l]);
        }
    }
    Ok(())
}
