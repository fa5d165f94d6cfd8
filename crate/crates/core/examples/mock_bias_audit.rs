//! End-to-end audit against the offline mock: generate, score, test, report.
//! Two countries are given a doubled miss rate; the audit should find them.
//!
//!     cargo run --example mock_bias_audit

use persona_bias::corpus::{write_corpus, Label, LabeledPost};
use persona_bias::pipeline::{self, files, Run};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let posts: Vec<_> = (0..1500)
        .map(|i| LabeledPost::new(format!("x{i}"), format!("post {i}"), if i % 4 == 3 { Label::Neutral } else { Label::Hate }))
        .collect();
    write_corpus(&dir.path().join("corpus.jsonl"), &posts)?;
    let config = dir.path().join("audit.toml");
    std::fs::write(
        &config,
        r#"corpus = "corpus.jsonl"
train_fraction = 0.2

[backend]
kind = "mock"
model_id = "mock-llm"

[backend.mock_rules]
base_fnr = 0.3
invalid_rate = 0.02
seed = 1

[backend.mock_rules.per_country_fnr_multiplier]
Cuba = 2.0
Qatar = 2.0

[stats]
alpha_level = 0.01
"#,
    )?;

    let run = Run::open(&config)?;
    let prep = pipeline::prepare(&run)?;
    println!("{} prompts for {} test posts", prep.manifest, prep.test);
    let batch = pipeline::run_generation(&run, None)?;
    println!("generated {}", batch.completed);
    let verdicts = pipeline::score(&run)?;
    println!("verdicts: {} hate, {} neutral, {} invalid", verdicts.hate, verdicts.neutral, verdicts.invalid);
    pipeline::stats(&run)?;
    pipeline::report(&run)?;
    println!("\n{}", std::fs::read_to_string(run.path(files::FNR_TABLE))?);
    print!("{}", std::fs::read_to_string(run.path(files::F1_TABLE))?);
    Ok(())
}
