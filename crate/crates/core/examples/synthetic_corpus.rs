//! Synthetic languages over a shared knowledge base.

use sutra::corpus::{build_qa_corpus, generate_kb, invert, make_languages, realize};

fn main() -> sutra::Result<()> {
    let langs = make_languages(3);
    let kb = generate_kb(7, 500)?;
    for st in kb.iter().take(3) {
        println!("{}", st.meaning_key());
        for spec in &langs {
            let s = realize(st, spec)?;
            assert_eq!(&invert(&s, spec)?, st);
            println!("  {:<5} {s}", spec.lang_id);
        }
    }
    let qa = build_qa_corpus(&kb, &langs, 2, 3)?;
    for l in ["en", &langs[1].lang_id] {
        println!("{l}: {} -> {}", qa[0].prompt(l)?, qa[0].answer_text(l)?);
    }
    Ok(())
}
