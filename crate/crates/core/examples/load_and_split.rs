//! Load a labelled corpus, attach a translation file and split it.
//!
//!     cargo run --example load_and_split

use persona_bias::corpus::{
    attach_translations, load_corpus, split_corpus, write_corpus, CorpusFormat, Label, LabeledPost, SplitSpec,
};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let corpus_path = dir.path().join("corpus.csv");
    std::fs::write(
        &corpus_path,
        "id,text,label,country\n\
         a1,you people should all leave,1,Nigeria\n\
         a2,lovely weather in the park today,0,Russia\n\
         a3,nobody wants your kind here,1,Cuba\n\
         a4,just finished a great book,0,China\n\
         a5,go back where you came from,1,Qatar\n",
    )?;
    let mut corpus = load_corpus(&corpus_path, CorpusFormat::Csv)?;
    println!("loaded {} posts, {} hateful", corpus.len(), corpus.iter().filter(|p| p.label == Label::Hate).count());

    let fa = dir.path().join("fa.jsonl");
    std::fs::write(&fa, "{\"id\":\"a1\",\"text\":\"شما مردم باید همه بروید\"}\n")?;
    let report = attach_translations(&mut corpus, "fa", &fa)?;
    println!("fa: {} attached, missing {:?}", report.attached, report.missing);

    let (train, test) = split_corpus(&corpus, SplitSpec { train_fraction: 0.6, seed: 7 })?;
    let ids = |s: &[LabeledPost]| s.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    println!("train {:?}\ntest  {:?}", ids(&train), ids(&test));
    write_corpus(&dir.path().join("test.jsonl"), &test)?;
    Ok(())
}
