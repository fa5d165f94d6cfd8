//! Query a live chat-completions endpoint with one persona prompt.
//!
//!     PERSONA_BIAS_API_KEY=... PERSONA_BIAS_BASE_URL=https://host/v1 \
//!     PERSONA_BIAS_MODEL=some-model cargo run --example remote_endpoint
//!
//! Does nothing unless the base URL variable is set.

use persona_bias::corpus::{default_roster, Label, LabeledPost};
use persona_bias::modelio::{query, BackendSpec, GenerationParams, QueryOutcome};
use persona_bias::normalize::{normalize_output, Lexicon};
use persona_bias::prompts::{build_prompt, PromptVariant};

fn main() -> anyhow::Result<()> {
    let Ok(base_url) = std::env::var("PERSONA_BIAS_BASE_URL") else {
        println!("PERSONA_BIAS_BASE_URL not set; skipping");
        return Ok(());
    };
    let model = std::env::var("PERSONA_BIAS_MODEL").unwrap_or_else(|_| "default".into());
    let spec = BackendSpec::remote(&model, &base_url);
    let backend = spec.open(None)?;

    let post = LabeledPost::new("demo", "If a song is sung by a girl there is a 94% chance I'm going to hate it", Label::Hate);
    let roster = default_roster();
    for persona in [None, Some(&roster[0])] {
        let variant = if persona.is_some() { PromptVariant::Country } else { PromptVariant::Baseline };
        let inst = build_prompt(&post, variant, persona)?;
        match query(backend.as_ref(), &inst, &GenerationParams::default(), &spec.retry_policy())? {
            QueryOutcome::Done(rec) => println!(
                "{:<12} {:?} -> {:?} ({} ms)",
                persona.map_or("baseline", |c| c.name.as_str()),
                rec.raw_output,
                normalize_output(&rec.raw_output, &rec.language_code, &Lexicon::default()),
                rec.latency_ms
            ),
            QueryOutcome::Failed(f) => println!("failed after {} attempts: {}", f.attempt_count, f.error),
        }
    }
    println!("top_k sent: {:?}", backend.top_k_sent());
    Ok(())
}
