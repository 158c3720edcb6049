//! Train a pivot-only tokenizer, extend it with pieces learned on the other
//! scripts, and compare token counts on held-out text.

use sutra::corpus::Split;
use sutra::eval::fertility_eval;
use sutra::recipes::DeskWorld;

fn main() -> sutra::Result<()> {
    let w = DeskWorld::standard(7)?;
    println!(
        "vocab: base {}, extension {}, merged {}",
        w.base_tokenizer.vocab_size(),
        w.extension_tokenizer.vocab_size(),
        w.tokenizer.vocab_size()
    );
    let held_out = w.texts_by_lang(Split::Test);
    print!("{}", fertility_eval(("base", &w.base_tokenizer), ("merged", &w.tokenizer), &held_out).to_table());
    let s = &held_out[1].1[0];
    let pieces: Vec<String> = w.tokenizer.encode(s).iter().filter_map(|&i| w.tokenizer.piece(i)).collect();
    println!("{s:?} -> {pieces:?}");
    Ok(())
}
