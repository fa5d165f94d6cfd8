//! Mapping raw model text onto a three-valued verdict.
//!
//! The matcher lowercases the response, turns punctuation into spaces and
//! scans the first [`PREFIX_TOKENS`] tokens for lexicon terms. A response
//! that hits terms of both polarities is `Invalid`, as is one that hits
//! neither. If the prefix scan finds nothing, the whole response with
//! whitespace removed is compared against each term as a last resort.
//!
//! Built-in terms: the base sets (`true`, `yes`, `vraiment` / `false`, `no`,
//! `faux`) apply to every language. The per-language extensions for
//! es/fa/ms/ar/ru/zh/ko/be and the extra French forms are inferred
//! defaults, not an observed model vocabulary; override them with a
//! lexicon file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelio::GenerationRecord;

pub const PREFIX_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Hate,
    Neutral,
    Invalid,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon {path}: {source}")]
    Parse {
        path: std::path::PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("term {term:?} is both positive and negative for language {language}")]
    Overlap { language: String, term: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSets {
    #[serde(default)]
    pub positive: BTreeSet<String>,
    #[serde(default)]
    pub negative: BTreeSet<String>,
}

impl TermSets {
    fn from_lists(pos: &[&str], neg: &[&str]) -> Self {
        Self {
            positive: pos.iter().map(|s| s.to_string()).collect(),
            negative: neg.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn merge(&mut self, other: TermSets) {
        self.positive.extend(other.positive);
        self.negative.extend(other.negative);
    }
}

/// Lexicon file layout (TOML):
///
/// ```toml
/// [base]
/// positive = ["true", "yes"]
/// negative = ["false", "no"]
///
/// [languages.fr]
/// positive = ["vrai"]
/// negative = ["non"]
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    #[serde(default)]
    pub base: TermSets,
    #[serde(default)]
    pub languages: BTreeMap<String, TermSets>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let base = TermSets::from_lists(&["true", "yes", "vraiment"], &["false", "no", "faux"]);
        let languages = [
            ("fr", &["vrai", "oui"][..], &["non"][..]),
            ("es", &["verdadero", "sí", "si", "cierto"], &["falso", "no"]),
            ("fa", &["درست", "بله", "صحیح"], &["نادرست", "خیر", "نه", "غلط"]),
            ("ms", &["benar", "betul", "ya"], &["salah", "tidak", "bukan"]),
            ("ar", &["صحيح", "نعم", "صح"], &["خطأ", "خاطئ", "لا"]),
            ("ru", &["правда", "истина", "да", "верно"], &["ложь", "нет", "неверно"]),
            ("zh", &["真", "是的", "正确"], &["假", "否", "不是", "错误"]),
            ("ko", &["참", "예", "네"], &["거짓", "아니요", "아니오"]),
            ("be", &["праўда", "так", "ісціна"], &["хлусня", "не", "няпраўда"]),
        ]
        .into_iter()
        .map(|(lang, pos, neg)| (lang.to_string(), TermSets::from_lists(pos, neg)))
        .collect();
        Self { base, languages }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0xF900..=0xFAFF | 0x3040..=0x30FF)
}

fn normalize_text(raw: &str) -> String {
    raw.chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect()
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

struct CompiledTerm {
    tokens: Vec<String>,
    compact: String,
    cjk: bool,
}

impl CompiledTerm {
    fn new(term: &str) -> Self {
        let norm = normalize_text(term);
        let tokens: Vec<String> = tokens(&norm).into_iter().map(str::to_string).collect();
        let compact = tokens.concat();
        let cjk = compact.chars().any(is_cjk);
        Self { tokens, compact, cjk }
    }

    fn matches_prefix(&self, prefix: &[&str]) -> bool {
        if self.tokens.is_empty() {
            return false;
        }
        if self.cjk && prefix.iter().any(|t| t.contains(self.compact.as_str())) {
            return true;
        }
        prefix
            .windows(self.tokens.len())
            .any(|w| w.iter().zip(&self.tokens).all(|(a, b)| *a == b))
    }
}

impl Lexicon {
    /// Built-in defaults with the file's terms merged on top.
    pub fn from_file(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let overlay: Lexicon = toml::from_str(&text).map_err(|source| LexiconError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lex = Lexicon::default();
        lex.merge(overlay);
        lex.validate()?;
        Ok(lex)
    }

    pub fn merge(&mut self, other: Lexicon) {
        self.base.merge(other.base);
        for (lang, sets) in other.languages {
            self.languages.entry(lang).or_default().merge(sets);
        }
    }

    /// Effective term sets for one language: base ∪ extension.
    pub fn terms_for(&self, language_code: &str) -> TermSets {
        let mut sets = self.base.clone();
        if let Some(ext) = self.languages.get(language_code) {
            sets.merge(ext.clone());
        }
        sets
    }

    /// Positive and negative sets must be disjoint within every language.
    pub fn validate(&self) -> Result<(), LexiconError> {
        let langs = std::iter::once("").chain(self.languages.keys().map(String::as_str));
        for lang in langs {
            let sets = self.terms_for(lang);
            if let Some(term) = sets.positive.intersection(&sets.negative).next() {
                return Err(LexiconError::Overlap {
                    language: if lang.is_empty() { "base".into() } else { lang.into() },
                    term: term.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn normalize_output(raw: &str, language_code: &str, lexicon: &Lexicon) -> Verdict {
    let sets = lexicon.terms_for(language_code);
    let positive: Vec<CompiledTerm> = sets.positive.iter().map(|t| CompiledTerm::new(t)).collect();
    let negative: Vec<CompiledTerm> = sets.negative.iter().map(|t| CompiledTerm::new(t)).collect();

    let norm = normalize_text(raw);
    let all = tokens(&norm);
    let prefix = &all[..all.len().min(PREFIX_TOKENS)];
    let mut pos = positive.iter().any(|t| t.matches_prefix(prefix));
    let mut neg = negative.iter().any(|t| t.matches_prefix(prefix));
    if !pos && !neg {
        let compact = all.concat();
        pos = positive.iter().any(|t| t.compact == compact);
        neg = negative.iter().any(|t| t.compact == compact);
    }
    match (pos, neg) {
        (true, false) => Verdict::Hate,
        (false, true) => Verdict::Neutral,
        _ => Verdict::Invalid,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub hate: usize,
    pub neutral: usize,
    pub invalid: usize,
}

impl VerdictCounts {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Hate => self.hate += 1,
            Verdict::Neutral => self.neutral += 1,
            Verdict::Invalid => self.invalid += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.hate + self.neutral + self.invalid
    }
}

/// Fill the verdict of every record, overwriting any previous one.
pub fn apply_verdicts(records: &mut [GenerationRecord], lexicon: &Lexicon) -> VerdictCounts {
    let mut counts = VerdictCounts::default();
    for rec in records.iter_mut() {
        let v = normalize_output(&rec.raw_output, &rec.language_code, lexicon);
        rec.verdict = Some(v);
        counts.add(v);
    }
    counts
}
