//! Persona and task prompt rendering, and expansion of a test set into the
//! variant × persona × language prompt matrix.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CountryEntry, LabeledPost};
use crate::io::{read_jsonl, stable_hash, write_jsonl, JsonlError};

/// Language of the untranslated corpus text.
pub const SOURCE_LANGUAGE: &str = "en";

const TASK_PROMPT: &str = "Determine whether a social media message is hateful or not. \
Respond with either a True for hate speech or False for neutral. \
Do not include nothing else than True or False.";

const MESSAGE_OPEN: &str = "<Message>";
const MESSAGE_CLOSE: &str = "</Message>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("post {post_id} has no {language} translation")]
    MissingTranslation { post_id: String, language: String },
    #[error("variant {variant} requires a persona country")]
    MissingPersona { variant: PromptVariant },
    #[error("variant {variant} takes no persona (got {country})")]
    UnexpectedPersona {
        variant: PromptVariant,
        country: String,
    },
    #[error("post {post_id}: message text contains a literal </Message>")]
    EmbeddedDelimiter { post_id: String },
    #[error("duplicate instance key {0}")]
    DuplicateInstance(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Baseline,
    Country,
    Lang,
    CountryLang,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 4] = [
        PromptVariant::Baseline,
        PromptVariant::Country,
        PromptVariant::Lang,
        PromptVariant::CountryLang,
    ];

    pub fn has_persona(self) -> bool {
        matches!(self, PromptVariant::Country | PromptVariant::CountryLang)
    }

    pub fn is_translated(self) -> bool {
        matches!(self, PromptVariant::Lang | PromptVariant::CountryLang)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Baseline => "baseline",
            PromptVariant::Country => "country",
            PromptVariant::Lang => "lang",
            PromptVariant::CountryLang => "country_lang",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown prompt variant {s:?}"))
    }
}

/// The two language settings a run can cover. English pairs baseline with
/// country personas; the translated setting pairs lang with country-lang.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageSetting {
    English,
    Translated,
}

impl LanguageSetting {
    pub fn variants(self) -> [PromptVariant; 2] {
        match self {
            LanguageSetting::English => [PromptVariant::Baseline, PromptVariant::Country],
            LanguageSetting::Translated => [PromptVariant::Lang, PromptVariant::CountryLang],
        }
    }
}

/// Persona instruction templates. `B` is the one used for all reported runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PersonaTemplate {
    A,
    #[default]
    B,
    C,
}

impl PersonaTemplate {
    pub fn render(self, country: &str) -> String {
        match self {
            PersonaTemplate::A => format!(
                "You are someone from {country}. Your responses should closely mirror the \
                 knowledge and abilities of this persona."
            ),
            PersonaTemplate::B => format!(
                "Adopt the identity of someone from {country}. Answer the questions while \
                 staying in strict accordance with the nature of this identity."
            ),
            PersonaTemplate::C => format!(
                "Take the role of someone from {country}. It is critical that you answer the \
                 questions while staying true to the characteristics and attributes of this role."
            ),
        }
    }
}

pub fn render_persona(country: &str) -> String {
    PersonaTemplate::B.render(country)
}

pub fn render_task() -> &'static str {
    TASK_PROMPT
}

/// Task prompt followed by the wrapped message, with no persona.
pub fn render_body(message: &str) -> String {
    format!("{TASK_PROMPT}{MESSAGE_OPEN}{message}{MESSAGE_CLOSE}")
}

/// The text between the first `<Message>` and the last `</Message>`.
pub fn extract_message(rendered: &str) -> Option<&str> {
    let start = rendered.find(MESSAGE_OPEN)? + MESSAGE_OPEN.len();
    let end = rendered.rfind(MESSAGE_CLOSE)?;
    (start <= end).then(|| &rendered[start..end])
}

/// Split a rendered prompt into its persona sentence (if any) and the
/// task-plus-message body.
pub fn split_persona(rendered: &str) -> (Option<&str>, &str) {
    match rendered.find(TASK_PROMPT) {
        Some(0) | None => (None, rendered),
        Some(i) => (Some(rendered[..i].trim_end()), &rendered[i..]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub post_id: String,
    pub variant: PromptVariant,
    pub persona_country: Option<String>,
    pub language_code: String,
    pub rendered_text: String,
    pub instance_key: String,
}

impl PromptInstance {
    fn new(
        post_id: &str,
        variant: PromptVariant,
        persona_country: Option<&str>,
        language_code: &str,
        rendered_text: String,
    ) -> Self {
        let instance_key = stable_hash([
            post_id,
            variant.as_str(),
            persona_country.unwrap_or(""),
            language_code,
            rendered_text.as_str(),
        ]);
        Self {
            post_id: post_id.to_string(),
            variant,
            persona_country: persona_country.map(str::to_string),
            language_code: language_code.to_string(),
            rendered_text,
            instance_key,
        }
    }
}

/// Renders prompts for one configuration.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub template: PersonaTemplate,
    /// Also emit a persona for the post's author country when it is not
    /// already one of the roster personas.
    pub include_author_persona: bool,
    author_languages: HashMap<String, String>,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self::new(&crate::corpus::default_roster())
    }
}

impl PromptBuilder {
    /// `roster` supplies the country → language map used to pick the target
    /// language of untranslated-persona (`Lang`) prompts from the author's country.
    pub fn new(roster: &[CountryEntry]) -> Self {
        Self {
            template: PersonaTemplate::default(),
            include_author_persona: false,
            author_languages: roster
                .iter()
                .map(|c| (c.name.clone(), c.language_code.clone()))
                .collect(),
        }
    }

    pub fn with_template(mut self, template: PersonaTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_author_persona(mut self, on: bool) -> Self {
        self.include_author_persona = on;
        self
    }

    fn country_language(&self, country: Option<&str>) -> &str {
        country
            .and_then(|c| self.author_languages.get(c))
            .map(String::as_str)
            .unwrap_or(SOURCE_LANGUAGE)
    }

    pub fn build(
        &self,
        post: &LabeledPost,
        variant: PromptVariant,
        persona: Option<&CountryEntry>,
    ) -> Result<PromptInstance, PromptError> {
        match (variant.has_persona(), persona) {
            (true, None) => return Err(PromptError::MissingPersona { variant }),
            (false, Some(c)) => {
                return Err(PromptError::UnexpectedPersona {
                    variant,
                    country: c.name.clone(),
                })
            }
            _ => {}
        }
        let language = match variant {
            PromptVariant::Baseline | PromptVariant::Country => SOURCE_LANGUAGE,
            PromptVariant::Lang => self.country_language(post.author_country.as_deref()),
            PromptVariant::CountryLang => persona.map(|c| c.language_code.as_str()).unwrap_or(SOURCE_LANGUAGE),
        };
        let message = if language == SOURCE_LANGUAGE {
            post.text.as_str()
        } else {
            post.translation(language)
                .ok_or_else(|| PromptError::MissingTranslation {
                    post_id: post.id.clone(),
                    language: language.to_string(),
                })?
        };
        if message.contains(MESSAGE_CLOSE) {
            return Err(PromptError::EmbeddedDelimiter {
                post_id: post.id.clone(),
            });
        }
        let body = render_body(message);
        let rendered = match persona {
            Some(c) => format!("{} {body}", self.template.render(&c.name)),
            None => body,
        };
        Ok(PromptInstance::new(
            &post.id,
            variant,
            persona.map(|c| c.name.as_str()),
            language,
            rendered,
        ))
    }

    /// Expand posts into prompt instances. Order: post order; within a post
    /// baseline, country personas in roster order, lang, then country-lang
    /// personas in roster order.
    pub fn expand(
        &self,
        posts: &[LabeledPost],
        roster: &[CountryEntry],
        variants: &[PromptVariant],
    ) -> Result<Vec<PromptInstance>, PromptError> {
        let wants = |v| variants.contains(&v);
        let per_post = variants
            .iter()
            .map(|v| if v.has_persona() { roster.len() } else { 1 })
            .sum::<usize>();
        let mut out = Vec::with_capacity(posts.len() * per_post);
        let mut seen = std::collections::HashSet::with_capacity(out.capacity());
        for post in posts {
            let author = self.author_persona(post, roster);
            for (plain, with_persona) in [
                (PromptVariant::Baseline, PromptVariant::Country),
                (PromptVariant::Lang, PromptVariant::CountryLang),
            ] {
                if wants(plain) {
                    out.push(self.build(post, plain, None)?);
                }
                if wants(with_persona) {
                    for country in roster.iter().chain(author.as_ref()) {
                        out.push(self.build(post, with_persona, Some(country))?);
                    }
                }
            }
        }
        for inst in &out {
            if !seen.insert(inst.instance_key.as_str()) {
                return Err(PromptError::DuplicateInstance(inst.instance_key.clone()));
            }
        }
        Ok(out)
    }

    fn author_persona(&self, post: &LabeledPost, roster: &[CountryEntry]) -> Option<CountryEntry> {
        if !self.include_author_persona {
            return None;
        }
        let name = post.author_country.as_deref()?;
        if roster.iter().any(|c| c.name == name) {
            return None;
        }
        Some(CountryEntry::new(
            name,
            self.country_language(Some(name)),
            false,
        ))
    }
}

pub fn build_prompt(
    post: &LabeledPost,
    variant: PromptVariant,
    persona: Option<&CountryEntry>,
) -> Result<PromptInstance, PromptError> {
    PromptBuilder::default().build(post, variant, persona)
}

pub fn expand_matrix(
    test_set: &[LabeledPost],
    roster: &[CountryEntry],
    variants: &[PromptVariant],
) -> Result<Vec<PromptInstance>, PromptError> {
    PromptBuilder::new(roster).expand(test_set, roster, variants)
}

pub fn write_manifest(path: &Path, instances: &[PromptInstance]) -> std::io::Result<()> {
    write_jsonl(path, instances)
}

pub fn read_manifest(path: &Path) -> Result<Vec<PromptInstance>, JsonlError> {
    read_jsonl(path)
}
