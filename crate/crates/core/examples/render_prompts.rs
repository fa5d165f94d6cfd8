//! Expand a post into the full persona × language prompt matrix.
//!
//!     cargo run --example render_prompts

use persona_bias::corpus::{default_roster, Label, LabeledPost};
use persona_bias::prompts::{expand_matrix, PersonaTemplate, PromptBuilder, PromptVariant};

fn main() -> anyhow::Result<()> {
    let roster = default_roster();
    let mut post = LabeledPost::new("p1", "If a song is sung by a girl there is a 94% chance I'm going to hate it", Label::Hate);
    post.author_country = Some("Brunei".into());
    for lang in ["fa", "be", "ms", "zh", "es", "ko", "ar", "ru"] {
        post.translations.insert(lang.into(), format!("<{lang} translation>"));
    }

    let english = expand_matrix(std::slice::from_ref(&post), &roster, &[PromptVariant::Baseline, PromptVariant::Country])?;
    println!("english setting: {} prompts per post", english.len());
    println!("{}\n", english[1].rendered_text);

    let all = expand_matrix(std::slice::from_ref(&post), &roster, &PromptVariant::ALL)?;
    println!("both settings: {} prompts per post", all.len());
    for inst in all.iter().filter(|i| i.variant == PromptVariant::CountryLang).take(3) {
        println!("  {:<12} {}  {}", inst.persona_country.as_deref().unwrap_or("-"), inst.language_code, &inst.instance_key[..12]);
    }

    let alt = PromptBuilder::new(&roster).with_template(PersonaTemplate::A);
    let inst = alt.build(&post, PromptVariant::Country, Some(&roster[2]))?;
    println!("\ntemplate A: {}", inst.rendered_text);
    Ok(())
}
