//! Map free-text model answers onto verdicts, including a custom lexicon.
//!
//!     cargo run --example normalize_outputs

use persona_bias::normalize::{normalize_output, Lexicon};

fn main() -> anyhow::Result<()> {
    let mut lexicon = Lexicon::default();
    let dir = tempfile::tempdir()?;
    let extra = dir.path().join("lexicon.toml");
    std::fs::write(&extra, "[languages.de]\npositive = [\"wahr\", \"ja\"]\nnegative = [\"falsch\", \"nein\"]\n")?;
    lexicon.merge(Lexicon::from_file(&extra)?);

    for (raw, lang) in [
        ("True", "en"),
        ("False.", "en"),
        ("**True** - this message targets a group", "en"),
        ("Vraiment", "fr"),
        ("Falso", "es"),
        ("نعم", "ar"),
        ("是的", "zh"),
        ("不是", "zh"),
        ("Falsch", "de"),
        ("I cannot perform this action", "en"),
        ("True or False? Hard to say", "en"),
    ] {
        println!("{raw:<45} [{lang}] -> {:?}", normalize_output(raw, lang, &lexicon));
    }
    Ok(())
}
