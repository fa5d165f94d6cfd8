//! Labeled corpus ingestion, translations, the country roster and
//! deterministic train/test splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Row {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("duplicate post id {0:?}")]
    DuplicateId(String),
    #[error("duplicate country {0:?} in roster")]
    DuplicateCountry(String),
    #[error("invalid language code {code:?} for {country}")]
    BadLanguageCode { country: String, code: String },
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("translation file {path} declares language {found:?}, expected {expected:?}")]
    LanguageMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Gold label. Serialized as `1` for hate and `0` for neutral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Hate,
    Neutral,
}

impl Label {
    pub fn as_int(self) -> u8 {
        match self {
            Label::Hate => 1,
            Label::Neutral => 0,
        }
    }

    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            1 => Some(Label::Hate),
            0 => Some(Label::Neutral),
            _ => None,
        }
    }

    /// The word the task prompt asks the model to answer with.
    pub fn answer_word(self) -> &'static str {
        match self {
            Label::Hate => "True",
            Label::Neutral => "False",
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_int())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        parse_label(&v).ok_or_else(|| serde::de::Error::custom(format!("label {v} is not 0 or 1")))
    }
}

fn parse_label(v: &serde_json::Value) -> Option<Label> {
    match v {
        serde_json::Value::Number(n) => n.as_i64().and_then(Label::from_int),
        serde_json::Value::String(s) => s.trim().parse::<i64>().ok().and_then(Label::from_int),
        serde_json::Value::Bool(b) => Some(if *b { Label::Hate } else { Label::Neutral }),
        _ => None,
    }
}

/// One corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPost {
    pub id: String,
    pub text: String,
    pub label: Label,
    #[serde(default, rename = "country", skip_serializing_if = "Option::is_none")]
    pub author_country: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub translations: BTreeMap<String, String>,
}

impl LabeledPost {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label,
            author_country: None,
            translations: BTreeMap::new(),
        }
    }

    pub fn translation(&self, language_code: &str) -> Option<&str> {
        self.translations.get(language_code).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
struct RawRow {
    id: Option<serde_json::Value>,
    text: Option<String>,
    label: Option<serde_json::Value>,
    #[serde(default)]
    country: Option<String>,
    #[serde(default)]
    translations: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn row_err(path: &Path, row: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Row {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn post_from_row(path: &Path, row: usize, raw: RawRow) -> Result<LabeledPost> {
    let id = match raw.id {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(other) => return Err(row_err(path, row, format!("id {other} is not a string"))),
        None => return Err(row_err(path, row, "missing field `id`")),
    };
    if id.is_empty() {
        return Err(row_err(path, row, "empty id"));
    }
    let text = raw
        .text
        .ok_or_else(|| row_err(path, row, "missing field `text`"))?;
    if text.is_empty() {
        return Err(row_err(path, row, "empty text"));
    }
    let label_value = raw
        .label
        .ok_or_else(|| row_err(path, row, "missing field `label`"))?;
    let label = parse_label(&label_value)
        .ok_or_else(|| row_err(path, row, format!("label {label_value} is not 0 or 1")))?;
    if let Some((lang, _)) = raw.translations.iter().find(|(_, t)| t.is_empty()) {
        return Err(row_err(path, row, format!("empty {lang} translation")));
    }
    Ok(LabeledPost {
        id,
        text,
        label,
        author_country: raw.country.filter(|c| !c.trim().is_empty()),
        translations: raw.translations,
    })
}

/// Load a corpus file. Rows are numbered from 1 (for JSONL, the line number).
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<LabeledPost>> {
    let rows: Vec<(usize, RawRow)> = match format {
        CorpusFormat::Jsonl => {
            let file = File::open(path).map_err(io_err(path))?;
            let mut rows = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawRow = serde_json::from_str(&line)
                    .map_err(|e| row_err(path, i + 1, format!("malformed record: {e}")))?;
                rows.push((i + 1, raw));
            }
            rows
        }
        CorpusFormat::Csv => {
            let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(source) => CorpusError::Io {
                    path: path.to_path_buf(),
                    source,
                },
                other => row_err(path, 0, format!("{other:?}")),
            })?;
            let headers = reader
                .headers()
                .map_err(|e| row_err(path, 0, e.to_string()))?
                .clone();
            let mut rows = Vec::new();
            for (i, rec) in reader.records().enumerate() {
                let row = i + 1;
                let rec = rec.map_err(|e| row_err(path, row, e.to_string()))?;
                let field = |name: &str| {
                    headers
                        .iter()
                        .position(|h| h == name)
                        .and_then(|idx| rec.get(idx))
                        .map(str::to_string)
                };
                rows.push((
                    row,
                    RawRow {
                        id: field("id").map(serde_json::Value::String),
                        text: field("text"),
                        label: field("label").map(serde_json::Value::String),
                        country: field("country"),
                        translations: BTreeMap::new(),
                    },
                ));
            }
            rows
        }
    };

    let mut seen = HashSet::with_capacity(rows.len());
    let mut posts = Vec::with_capacity(rows.len());
    for (row, raw) in rows {
        let post = post_from_row(path, row, raw)?;
        if !seen.insert(post.id.clone()) {
            return Err(CorpusError::DuplicateId(post.id));
        }
        posts.push(post);
    }
    Ok(posts)
}

/// Write posts as JSONL, one record per line, in the given order.
pub fn write_corpus(path: &Path, posts: &[LabeledPost]) -> std::io::Result<()> {
    crate::io::write_jsonl(path, posts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryEntry {
    pub name: String,
    pub language_code: String,
    #[serde(default)]
    pub in_debias_set: bool,
}

impl CountryEntry {
    pub fn new(name: &str, language_code: &str, in_debias_set: bool) -> Self {
        Self {
            name: name.to_string(),
            language_code: language_code.to_string(),
            in_debias_set,
        }
    }
}

/// The twelve persona countries with their default official languages.
/// Afghanistan, Brunei, Qatar and Saudi Arabia form the debias set.
pub fn default_roster() -> Vec<CountryEntry> {
    [
        ("Afghanistan", "fa", true),
        ("Belarus", "be", false),
        ("Brunei", "ms", true),
        ("China", "zh", false),
        ("Cuba", "es", false),
        ("Nicaragua", "es", false),
        ("Nigeria", "en", false),
        ("North Korea", "ko", false),
        ("Qatar", "ar", true),
        ("Russia", "ru", false),
        ("Saudi Arabia", "ar", true),
        ("Uganda", "en", false),
    ]
    .into_iter()
    .map(|(n, l, d)| CountryEntry::new(n, l, d))
    .collect()
}

pub fn validate_roster(roster: &[CountryEntry]) -> Result<()> {
    let mut names = HashSet::new();
    for entry in roster {
        if !names.insert(entry.name.as_str()) {
            return Err(CorpusError::DuplicateCountry(entry.name.clone()));
        }
        let code = &entry.language_code;
        if code.is_empty() || code.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
            return Err(CorpusError::BadLanguageCode {
                country: entry.name.clone(),
                code: code.clone(),
            });
        }
    }
    Ok(())
}

/// Load a roster override (JSONL records `{name, language_code, in_debias_set}`).
pub fn load_roster(path: &Path) -> Result<Vec<CountryEntry>> {
    let roster: Vec<CountryEntry> =
        crate::io::read_jsonl(path).map_err(|e| crate::io::into_corpus_error(path, e))?;
    validate_roster(&roster)?;
    Ok(roster)
}

pub fn debias_subset(roster: &[CountryEntry]) -> Vec<CountryEntry> {
    roster.iter().filter(|c| c.in_debias_set).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 42,
        }
    }
}

/// Seeded shuffle split. `|train| = round(train_fraction * |corpus|)`; each
/// side keeps the corpus order of its members.
pub fn split_corpus(
    corpus: &[LabeledPost],
    spec: SplitSpec,
) -> Result<(Vec<LabeledPost>, Vec<LabeledPost>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(CorpusError::BadFraction(spec.train_fraction));
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n_train = (spec.train_fraction * corpus.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let mut in_train = vec![false; corpus.len()];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = corpus
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(p, _)| p).collect(),
        test.into_iter().map(|(p, _)| p).collect(),
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttachReport {
    pub attached: usize,
    /// Corpus posts the file did not cover.
    pub missing: Vec<String>,
    /// Ids in the file that are not in the corpus.
    pub unknown_ids: Vec<String>,
}

#[derive(Deserialize)]
struct TranslationRow {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    language: Option<String>,
}

/// Language declared by a translation file: a leading `{"language": ".."}`
/// header record, else the last dot-separated component of the file stem
/// (`fa.jsonl`, `test.fa.jsonl`).
pub fn translation_language(path: &Path) -> Result<Option<String>> {
    let file = File::open(path).map_err(io_err(path))?;
    let first = BufReader::new(file)
        .lines()
        .map_while(std::result::Result::ok)
        .find(|l| !l.trim().is_empty());
    if let Some(line) = first {
        if let Ok(row) = serde_json::from_str::<TranslationRow>(&line) {
            if row.id.is_none() {
                if let Some(lang) = row.language {
                    return Ok(Some(lang));
                }
            }
        }
    }
    Ok(path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit('.').next())
        .filter(|s| (2..=3).contains(&s.len()) && s.chars().all(|c| c.is_ascii_lowercase()))
        .map(str::to_string))
}

/// Attach one language's translations (JSONL `{id, text}` records) to the corpus.
pub fn attach_translations(
    corpus: &mut [LabeledPost],
    language_code: &str,
    path: &Path,
) -> Result<AttachReport> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut by_id: HashMap<String, String> = HashMap::new();
    let mut file_order = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TranslationRow = serde_json::from_str(&line)
            .map_err(|e| row_err(path, i + 1, format!("malformed record: {e}")))?;
        match (row.id, row.text) {
            (None, _) => {
                if let Some(found) = row.language {
                    if found != language_code {
                        return Err(CorpusError::LanguageMismatch {
                            path: path.to_path_buf(),
                            expected: language_code.to_string(),
                            found,
                        });
                    }
                    continue;
                }
                return Err(row_err(path, i + 1, "missing field `id`"));
            }
            (Some(_), None) => return Err(row_err(path, i + 1, "missing field `text`")),
            (Some(_), Some(text)) if text.is_empty() => {
                return Err(row_err(path, i + 1, "empty translation text"))
            }
            (Some(id), Some(text)) => {
                file_order.push(id.clone());
                by_id.insert(id, text);
            }
        }
    }

    let mut report = AttachReport::default();
    let known: HashSet<&str> = corpus.iter().map(|p| p.id.as_str()).collect();
    report.unknown_ids = file_order
        .into_iter()
        .filter(|id| !known.contains(id.as_str()))
        .collect();
    for post in corpus.iter_mut() {
        match by_id.remove(&post.id) {
            Some(text) => {
                post.translations.insert(language_code.to_string(), text);
                report.attached += 1;
            }
            None => report.missing.push(post.id.clone()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn posts(n: usize) -> Vec<LabeledPost> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Hate } else { Label::Neutral };
                LabeledPost::new(format!("p{i}"), format!("text {i}"), label)
            })
            .collect()
    }

    #[test]
    fn loads_minimal_jsonl_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"text\":\"hello\",\"label\":0}\n{\"id\":\"b\",\"text\":\"x\",\"label\":1}\n",
        );
        let corpus = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].id, "a");
        assert_eq!(corpus[0].label, Label::Neutral);
        assert_eq!(corpus[1].id, "b");
        assert_eq!(corpus[1].label, Label::Hate);
    }

    #[test]
    fn bad_label_cites_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"text\":\"t\",\"label\":0}\n{\"id\":\"b\",\"text\":\"t\",\"label\":1}\n{\"id\":\"c\",\"text\":\"t\",\"label\":\"2\"}\n",
        );
        match load_corpus(&path, CorpusFormat::Jsonl).unwrap_err() {
            CorpusError::Row { row, message, .. } => {
                assert_eq!(row, 3);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_structured() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "c.jsonl", "{\"id\":\"a\",\"label\":0}\n");
        let err = load_corpus(&path, CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, CorpusError::Row { row: 1, .. }));
        assert!(err.to_string().contains("text"));
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"text\":\"t\",\"label\":0}\n{\"id\":\"a\",\"text\":\"u\",\"label\":1}\n",
        );
        match load_corpus(&path, CorpusFormat::Jsonl).unwrap_err() {
            CorpusError::DuplicateId(id) => assert_eq!(id, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loads_csv_with_country() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "c.csv",
            "id,text,label,country\na,\"hi, there\",1,Qatar\nb,bye,0,\n",
        );
        let corpus = load_corpus(&path, CorpusFormat::Csv).unwrap();
        assert_eq!(corpus[0].text, "hi, there");
        assert_eq!(corpus[0].author_country.as_deref(), Some("Qatar"));
        assert_eq!(corpus[1].author_country, None);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_corpus(Path::new("/nonexistent/c.jsonl"), CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn split_sizes_follow_rounding() {
        let corpus = posts(24132);
        let (train, test) = split_corpus(&corpus, SplitSpec { train_fraction: 0.8, seed: 7 }).unwrap();
        assert_eq!((train.len(), test.len()), (19306, 4826));
    }

    #[test]
    fn split_is_deterministic() {
        let corpus = posts(10);
        let spec = SplitSpec { train_fraction: 0.5, seed: 3 };
        assert_eq!(split_corpus(&corpus, spec).unwrap(), split_corpus(&corpus, spec).unwrap());
    }

    #[test]
    fn different_seeds_give_different_membership() {
        let corpus = posts(10);
        let ids = |seed| -> Vec<String> {
            let (train, _) = split_corpus(&corpus, SplitSpec { train_fraction: 0.5, seed }).unwrap();
            train.into_iter().map(|p| p.id).collect()
        };
        let a = ids(1);
        let b = ids(2);
        assert_eq!(a.len(), 5);
        assert_ne!(a, b);
    }

    #[test]
    fn split_rejects_bad_fraction_and_empty() {
        let corpus = posts(4);
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                split_corpus(&corpus, SplitSpec { train_fraction: f, seed: 0 }),
                Err(CorpusError::BadFraction(_))
            ));
        }
        assert!(matches!(
            split_corpus(&[], SplitSpec::default()),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn default_roster_countries() {
        let roster = default_roster();
        assert_eq!(roster.len(), 12);
        validate_roster(&roster).unwrap();
        let debias: Vec<_> = debias_subset(&roster).into_iter().map(|c| c.name).collect();
        assert_eq!(debias, ["Afghanistan", "Brunei", "Qatar", "Saudi Arabia"]);
        let lang = |n: &str| roster.iter().find(|c| c.name == n).unwrap().language_code.clone();
        assert_eq!(lang("Afghanistan"), "fa");
        assert_eq!(lang("Brunei"), "ms");
        assert_eq!(lang("Qatar"), "ar");
        assert_eq!(lang("Saudi Arabia"), "ar");
    }

    #[test]
    fn roster_validation_rejects_duplicates_and_bad_codes() {
        let mut roster = default_roster();
        roster.push(CountryEntry::new("Cuba", "es", false));
        assert!(matches!(validate_roster(&roster), Err(CorpusError::DuplicateCountry(_))));
        let bad = vec![CountryEntry::new("X", "FA", false)];
        assert!(matches!(validate_roster(&bad), Err(CorpusError::BadLanguageCode { .. })));
    }

    #[test]
    fn attach_full_and_partial_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = posts(2);
        let full = write(dir.path(), "fa.jsonl", "{\"id\":\"p0\",\"text\":\"x0\"}\n{\"id\":\"p1\",\"text\":\"x1\"}\n");
        let report = attach_translations(&mut corpus, "fa", &full).unwrap();
        assert_eq!(report.attached, 2);
        assert!(report.missing.is_empty());
        assert_eq!(corpus[1].translation("fa"), Some("x1"));

        let partial = write(dir.path(), "ar.jsonl", "{\"id\":\"p0\",\"text\":\"y0\"}\n{\"id\":\"zz\",\"text\":\"y\"}\n");
        let report = attach_translations(&mut corpus, "ar", &partial).unwrap();
        assert_eq!(report.attached, 1);
        assert_eq!(report.missing, vec!["p1".to_string()]);
        assert_eq!(report.unknown_ids, vec!["zz".to_string()]);
        // map union: both languages retrievable independently
        assert_eq!(corpus[0].translation("fa"), Some("x0"));
        assert_eq!(corpus[0].translation("ar"), Some("y0"));
        assert_eq!(corpus[1].translation("ar"), None);
        assert_eq!(corpus[0].text, "text 0");
    }

    #[test]
    fn attach_rejects_empty_text_and_language_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = posts(1);
        let empty = write(dir.path(), "ms.jsonl", "{\"id\":\"p0\",\"text\":\"\"}\n");
        assert!(attach_translations(&mut corpus, "ms", &empty).is_err());
        let header = write(dir.path(), "t.jsonl", "{\"language\":\"ar\"}\n{\"id\":\"p0\",\"text\":\"a\"}\n");
        assert_eq!(translation_language(&header).unwrap().as_deref(), Some("ar"));
        assert!(matches!(
            attach_translations(&mut corpus, "fa", &header),
            Err(CorpusError::LanguageMismatch { .. })
        ));
        attach_translations(&mut corpus, "ar", &header).unwrap();
        assert_eq!(corpus[0].translation("ar"), Some("a"));
        assert_eq!(translation_language(&empty).unwrap().as_deref(), Some("ms"));
    }
}
