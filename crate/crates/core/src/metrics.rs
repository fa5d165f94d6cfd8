//! Confusion counts, F1 variants and false negative rates per group.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::modelio::GenerationRecord;
use crate::normalize::Verdict;
use crate::prompts::PromptVariant;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record for post {0} has no gold label")]
    UnknownPost(String),
    #[error("record {0} has no verdict; normalize first")]
    MissingVerdict(String),
    #[error("cannot score an empty group")]
    EmptyGroup,
    #[error("{path}: {source}")]
    Csv {
        path: std::path::PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub invalid: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_, invalid: 0 }
    }

    /// Tally one prediction. In strict mode an invalid answer on a hate post
    /// counts as a false negative instead of being set aside.
    pub fn add(&mut self, verdict: Verdict, gold: Label, strict: bool) {
        match (verdict, gold) {
            (Verdict::Hate, Label::Hate) => self.tp += 1,
            (Verdict::Hate, Label::Neutral) => self.fp += 1,
            (Verdict::Neutral, Label::Neutral) => self.tn += 1,
            (Verdict::Neutral, Label::Hate) => self.fn_ += 1,
            (Verdict::Invalid, Label::Hate) if strict => self.fn_ += 1,
            (Verdict::Invalid, _) => self.invalid += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.invalid += other.invalid;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_ + self.invalid
    }

    pub fn hate_support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn neutral_support(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn f1_hate(&self) -> f64 {
        ratio(2.0 * self.tp as f64, (2 * self.tp + self.fp + self.fn_) as f64)
    }

    pub fn f1_neutral(&self) -> f64 {
        ratio(2.0 * self.tn as f64, (2 * self.tn + self.fn_ + self.fp) as f64)
    }

    pub fn f1_macro(&self) -> f64 {
        (self.f1_hate() + self.f1_neutral()) / 2.0
    }

    /// Micro F1; for single-label binary data this is accuracy.
    pub fn f1_micro(&self) -> f64 {
        let scored = self.tp + self.fp + self.tn + self.fn_;
        ratio((self.tp + self.tn) as f64, scored as f64)
    }

    /// Per-class F1 weighted by gold support.
    pub fn f1_weighted(&self) -> f64 {
        let (h, n) = (self.hate_support() as f64, self.neutral_support() as f64);
        ratio(h * self.f1_hate() + n * self.f1_neutral(), h + n)
    }

    /// FN / (FN + TP); undefined without hate cases.
    pub fn fnr(&self) -> Option<f64> {
        let hate = self.hate_support();
        (hate > 0).then(|| self.fn_ as f64 / hate as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    ByVariant,
    ByCountry,
    ByLanguage,
    Combined,
}

impl Grouping {
    pub const ALL: [Grouping; 4] = [
        Grouping::ByVariant,
        Grouping::ByCountry,
        Grouping::ByLanguage,
        Grouping::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::ByVariant => "by_variant",
            Grouping::ByCountry => "by_country",
            Grouping::ByLanguage => "by_language",
            Grouping::Combined => "combined",
        }
    }
}

/// Identifies one scored group. Fields the grouping does not split on are `None`.
/// A baseline (no persona) group has `country == None` under `by_country`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub model_id: String,
    pub variant: Option<PromptVariant>,
    pub country: Option<String>,
    pub language: Option<String>,
}

impl GroupKey {
    fn of(rec: &GenerationRecord, grouping: Grouping) -> Self {
        let (country, language) = match grouping {
            Grouping::ByVariant => (None, None),
            Grouping::ByCountry => (rec.persona_country.clone(), None),
            Grouping::ByLanguage => (None, Some(rec.language_code.clone())),
            Grouping::Combined => (rec.persona_country.clone(), Some(rec.language_code.clone())),
        };
        Self {
            model_id: rec.model_id.clone(),
            variant: Some(rec.variant),
            country,
            language,
        }
    }

    /// Label used in tables: the persona country, or the variant name for
    /// persona-free groups.
    pub fn display_name(&self) -> String {
        match (&self.country, self.variant) {
            (Some(c), _) => c.clone(),
            (None, Some(v)) => v.to_string(),
            (None, None) => "all".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub key: GroupKey,
    pub counts: ConfusionCounts,
    pub f1_hate: f64,
    pub f1_neutral: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub f1_weighted: f64,
    pub fnr: Option<f64>,
}

impl GroupMetrics {
    pub fn from_counts(key: GroupKey, counts: ConfusionCounts) -> Self {
        Self {
            key,
            f1_hate: counts.f1_hate(),
            f1_neutral: counts.f1_neutral(),
            f1_macro: counts.f1_macro(),
            f1_micro: counts.f1_micro(),
            f1_weighted: counts.f1_weighted(),
            fnr: counts.fnr(),
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Count invalid answers on hate posts as false negatives.
    #[serde(default)]
    pub strict_invalid: bool,
}

fn tally(
    counts: &mut ConfusionCounts,
    rec: &GenerationRecord,
    gold: &HashMap<String, Label>,
    opts: ScoreOptions,
) -> Result<(), MetricsError> {
    let label = gold
        .get(&rec.post_id)
        .ok_or_else(|| MetricsError::UnknownPost(rec.post_id.clone()))?;
    let verdict = rec
        .verdict
        .ok_or_else(|| MetricsError::MissingVerdict(rec.instance_key.clone()))?;
    counts.add(verdict, *label, opts.strict_invalid);
    Ok(())
}

fn common<T: PartialEq + Clone>(mut it: impl Iterator<Item = T>) -> Option<T> {
    let first = it.next()?;
    it.all(|x| x == first).then_some(first)
}

/// Score one group of records. The key keeps the fields all records share.
pub fn score_group(
    records: &[GenerationRecord],
    gold: &HashMap<String, Label>,
    opts: ScoreOptions,
) -> Result<GroupMetrics, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let mut counts = ConfusionCounts::default();
    for rec in records {
        tally(&mut counts, rec, gold, opts)?;
    }
    let key = GroupKey {
        model_id: common(records.iter().map(|r| r.model_id.clone())).unwrap_or_default(),
        variant: common(records.iter().map(|r| r.variant)),
        country: common(records.iter().map(|r| r.persona_country.clone())).flatten(),
        language: common(records.iter().map(|r| r.language_code.clone())),
    };
    Ok(GroupMetrics::from_counts(key, counts))
}

/// One `GroupMetrics` per non-empty group, ordered by key.
pub fn score_all(
    records: &[GenerationRecord],
    gold: &HashMap<String, Label>,
    grouping: Grouping,
    opts: ScoreOptions,
) -> Result<Vec<GroupMetrics>, MetricsError> {
    let mut groups: BTreeMap<GroupKey, ConfusionCounts> = BTreeMap::new();
    for rec in records {
        tally(groups.entry(GroupKey::of(rec, grouping)).or_default(), rec, gold, opts)?;
    }
    Ok(groups
        .into_iter()
        .map(|(k, c)| GroupMetrics::from_counts(k, c))
        .collect())
}

/// Flat row of the metrics file. Column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub grouping: Grouping,
    pub model_id: String,
    pub variant: Option<PromptVariant>,
    pub country: Option<String>,
    pub language: Option<String>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub invalid: u64,
    pub f1_hate: f64,
    pub f1_neutral: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub f1_weighted: f64,
    pub fnr: Option<f64>,
}

impl MetricsRow {
    pub fn new(grouping: Grouping, m: &GroupMetrics) -> Self {
        Self {
            grouping,
            model_id: m.key.model_id.clone(),
            variant: m.key.variant,
            country: m.key.country.clone(),
            language: m.key.language.clone(),
            tp: m.counts.tp,
            fp: m.counts.fp,
            tn: m.counts.tn,
            fn_: m.counts.fn_,
            invalid: m.counts.invalid,
            f1_hate: m.f1_hate,
            f1_neutral: m.f1_neutral,
            f1_macro: m.f1_macro,
            f1_micro: m.f1_micro,
            f1_weighted: m.f1_weighted,
            fnr: m.fnr,
        }
    }

    pub fn metrics(&self) -> GroupMetrics {
        GroupMetrics {
            key: GroupKey {
                model_id: self.model_id.clone(),
                variant: self.variant,
                country: self.country.clone(),
                language: self.language.clone(),
            },
            counts: ConfusionCounts {
                tp: self.tp,
                fp: self.fp,
                tn: self.tn,
                fn_: self.fn_,
                invalid: self.invalid,
            },
            f1_hate: self.f1_hate,
            f1_neutral: self.f1_neutral,
            f1_macro: self.f1_macro,
            f1_micro: self.f1_micro,
            f1_weighted: self.f1_weighted,
            fnr: self.fnr,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), MetricsError> {
    crate::table::write_csv(path, rows).map_err(|source| MetricsError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    crate::table::read_csv(path).map_err(|source| MetricsError::Csv {
        path: path.to_path_buf(),
        source,
    })
}
