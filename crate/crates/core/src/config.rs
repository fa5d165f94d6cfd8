//! Run configuration (TOML) and the content-addressed run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusFormat, SplitSpec};
use crate::debias::{LanguageMode, DEFAULT_ALPHA};
use crate::metrics::ScoreOptions;
use crate::modelio::{BackendSpec, GenerationParams};
use crate::prompts::{LanguageSetting, PersonaTemplate, PromptVariant};
use crate::stats::{Reference, TableShape};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Labelled corpus (JSONL or CSV).
    pub corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_format: Option<CorpusFormat>,
    /// Country roster (JSONL); the built-in twelve when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roster: Option<PathBuf>,
    /// One JSONL file per language, `{id, text}` records.
    #[serde(default)]
    pub translations: Vec<PathBuf>,
    /// Extra answer terms merged over the built-in lexicon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_settings")]
    pub language_settings: Vec<LanguageSetting>,
    /// Restrict the variants implied by `language_settings`; empty keeps all.
    #[serde(default)]
    pub variants: Vec<PromptVariant>,
    #[serde(default)]
    pub template: PersonaTemplate,
    #[serde(default)]
    pub include_author_persona: bool,
    pub backend: BackendSpec,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default)]
    pub scoring: ScoreOptions,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub debias: DebiasConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default)]
    pub reference: Reference,
    #[serde(default = "default_alpha_level")]
    pub alpha_level: f64,
    #[serde(default)]
    pub yates: bool,
    #[serde(default)]
    pub shape: TableShape,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            reference: Reference::Baseline,
            alpha_level: default_alpha_level(),
            yates: false,
            shape: TableShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebiasConfig {
    /// Weight of the consistency penalty.
    #[serde(default = "default_penalty_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mode")]
    pub mode: LanguageMode,
    /// Random vectors appended to the fixed golden cases.
    #[serde(default = "default_golden_random")]
    pub golden_random: usize,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            mode: LanguageMode::English,
            golden_random: default_golden_random(),
        }
    }
}

fn default_output_root() -> PathBuf {
    PathBuf::from("runs")
}
fn default_train_fraction() -> f64 {
    SplitSpec::default().train_fraction
}
fn default_seed() -> u64 {
    SplitSpec::default().seed
}
fn default_settings() -> Vec<LanguageSetting> {
    vec![LanguageSetting::English]
}
fn default_alpha_level() -> f64 {
    0.01
}
fn default_penalty_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_mode() -> LanguageMode {
    LanguageMode::English
}
fn default_golden_random() -> usize {
    256
}

/// A parsed config together with the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, backend: BackendSpec) -> Self {
        Self {
            corpus: corpus.into(),
            corpus_format: None,
            roster: None,
            translations: Vec::new(),
            lexicon: None,
            output_root: default_output_root(),
            train_fraction: default_train_fraction(),
            seed: default_seed(),
            language_settings: default_settings(),
            variants: Vec::new(),
            template: PersonaTemplate::default(),
            include_author_persona: false,
            backend,
            params: GenerationParams::default(),
            scoring: ScoreOptions::default(),
            stats: StatsConfig::default(),
            debias: DebiasConfig::default(),
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config = Self::from_toml(&text, path)?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.language_settings.is_empty() {
            return bad("language_settings is empty".into());
        }
        if self.prompt_variants().is_empty() {
            return bad("variants excludes every variant of the chosen language settings".into());
        }
        if !(self.stats.alpha_level > 0.0 && self.stats.alpha_level < 1.0) {
            return bad(format!("stats.alpha_level must lie in (0, 1), got {}", self.stats.alpha_level));
        }
        if !(self.debias.alpha >= 0.0 && self.debias.alpha.is_finite()) {
            return bad(format!("debias.alpha must be finite and >= 0, got {}", self.debias.alpha));
        }
        self.params
            .validate()
            .and_then(|_| self.backend.validate())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.seed,
        }
    }

    /// Variants to generate, in canonical order.
    pub fn prompt_variants(&self) -> Vec<PromptVariant> {
        PromptVariant::ALL
            .into_iter()
            .filter(|v| {
                self.language_settings.iter().any(|s| s.variants().contains(v))
                    && (self.variants.is_empty() || self.variants.contains(v))
            })
            .collect()
    }

    /// First 12 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let text = self.to_toml()?;
        Ok(crate::io::stable_hash([text.as_str()])[..12].to_string())
    }
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `<output_root>/run-<config hash>`.
    pub fn run_dir(&self) -> Result<PathBuf, ConfigError> {
        Ok(self
            .resolve(&self.config.output_root)
            .join(format!("run-{}", self.config.hash()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelio::MockPolicy;

    fn sample() -> RunConfig {
        let mut c = RunConfig::new("data/corpus.jsonl", BackendSpec::mock("mock", MockPolicy::default()));
        c.translations = vec!["data/fa.jsonl".into()];
        c.stats.reference = Reference::Country("Qatar".into());
        c
    }

    #[test]
    fn round_trip_is_identity() {
        let text = sample().to_toml().unwrap();
        let back = RunConfig::from_toml(&text, Path::new("x.toml")).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let text = r#"
corpus = "c.jsonl"
[backend]
kind = "remote"
model_id = "m"
base_url = "http://localhost:8000/v1"
"#;
        let c = RunConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.params, GenerationParams::default());
        assert_eq!(c.prompt_variants(), [PromptVariant::Baseline, PromptVariant::Country]);
        assert_eq!(c.split(), SplitSpec::default());
        assert_eq!(c.debias.alpha, 1.0);
        assert_eq!(c.backend.max_in_flight, 8);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let base = "corpus = \"c\"\n[backend]\nkind = \"mock\"\nmodel_id = \"m\"\n[backend.mock_rules]\nbase_fnr = 0.3\n";
        RunConfig::from_toml(base, Path::new("x")).unwrap();
        assert!(matches!(
            RunConfig::from_toml(&format!("colour = 1\n{base}"), Path::new("x")),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            RunConfig::from_toml(&format!("train_fraction = 1.5\n{base}"), Path::new("x")),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_toml(&format!("language_settings = [\"english\"]\nvariants = [\"lang\"]\n{base}"), Path::new("x")),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn both_settings_give_all_variants() {
        let mut c = sample();
        c.language_settings = vec![LanguageSetting::Translated, LanguageSetting::English];
        assert_eq!(c.prompt_variants(), PromptVariant::ALL);
        c.variants = vec![PromptVariant::CountryLang, PromptVariant::Baseline];
        assert_eq!(c.prompt_variants(), [PromptVariant::Baseline, PromptVariant::CountryLang]);
    }

    #[test]
    fn run_dir_is_content_addressed() {
        let l = LoadedConfig { config: sample(), base_dir: "/cfg".into() };
        let d = l.run_dir().unwrap();
        assert!(d.starts_with("/cfg/runs"));
        assert_eq!(d, l.run_dir().unwrap());
        let mut other = l.clone();
        other.config.seed += 1;
        assert_ne!(d, other.run_dir().unwrap());
        assert_eq!(l.resolve(Path::new("/abs/x")), Path::new("/abs/x"));
        assert_eq!(l.resolve(Path::new("rel")), Path::new("/cfg/rel"));
    }
}
