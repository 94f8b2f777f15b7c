//! Sentence-pair datasets: loading, normalization, label mapping and split hygiene.
//!
//! Two on-disk formats are supported, both described in `docs/datasets.md`:
//!
//! * TSV with a header row `id\tsource\ttarget\tlabel[\tcategory]`
//! * line-delimited JSON records with keys `id`, `source`, `target`, `label`, `category`
//!
//! Every loaded pair is NFC-normalized with trimmed, collapsed whitespace and carries
//! a gold [`Label`]. Unknown label tokens are hard errors.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// The two critical-error labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "ERR")]
    Err,
    #[serde(rename = "NOT")]
    Not,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Err, Label::Not];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Err => "ERR",
            Label::Not => "NOT",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Err => Label::Not,
            Label::Not => Label::Err,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fine-grained error types attached to some gold-ERR pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ErrorCategory {
    Num,
    Nam,
    Sen,
    Saf,
    Tox,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 5] = [
        ErrorCategory::Num,
        ErrorCategory::Nam,
        ErrorCategory::Sen,
        ErrorCategory::Saf,
        ErrorCategory::Tox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Num => "NUM",
            ErrorCategory::Nam => "NAM",
            ErrorCategory::Sen => "SEN",
            ErrorCategory::Saf => "SAF",
            ErrorCategory::Tox => "TOX",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCategory {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownCategory(s.to_string()))
    }
}

/// How label tokens are spelled in a source file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// `ERR` / `NOT` verbatim.
    Native,
    /// `OK` maps to NOT, `BAD` maps to ERR.
    OkBad,
}

impl LabelScheme {
    /// The token this scheme uses for `label`. Inverse of [`map_label`].
    pub fn token(self, label: Label) -> &'static str {
        match (self, label) {
            (LabelScheme::Native, l) => l.as_str(),
            (LabelScheme::OkBad, Label::Err) => "BAD",
            (LabelScheme::OkBad, Label::Not) => "OK",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Tsv,
    Jsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: String,
    pub source: String,
    pub target: String,
    pub gold: Option<Label>,
    pub category: Option<ErrorCategory>,
}

impl Pair {
    pub fn new(id: impl Into<String>, source: &str, target: &str, gold: Option<Label>) -> Pair {
        Pair {
            id: id.into(),
            source: normalize_text(source),
            target: normalize_text(target),
            gold,
            category: None,
        }
    }

    pub fn with_category(mut self, category: ErrorCategory) -> Pair {
        self.category = Some(category);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub pairs: Vec<Pair>,
    pub label_scheme: LabelScheme,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs carrying the given gold label, in file order.
    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.gold == Some(label))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub n_not: usize,
    pub n_err: usize,
}

impl LabelDistribution {
    pub fn total(&self) -> usize {
        self.n_not + self.n_err
    }

    /// Fraction of ERR labels, `None` for an empty split.
    pub fn err_rate(&self) -> Option<f64> {
        (self.total() > 0).then(|| self.n_err as f64 / self.total() as f64)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no records")]
    NoRecords,
    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("unknown label token {0:?}")]
    UnknownLabel(String),
    #[error("unknown error category {0:?}")]
    UnknownCategory(String),
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),
    #[error("row {row}: duplicate id {id:?}")]
    DuplicateId { row: usize, id: String },
}

/// NFC-normalize, trim, and collapse internal whitespace runs to one space.
/// Case, punctuation, digits and dates are untouched.
pub fn normalize_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalize a raw (source, target) pair given as bytes or strings.
pub fn normalize_pair(
    raw_source: impl AsRef<[u8]>,
    raw_target: impl AsRef<[u8]>,
) -> Result<(String, String), CorpusError> {
    let decode = |bytes: &[u8], what: &str| {
        std::str::from_utf8(bytes)
            .map(normalize_text)
            .map_err(|e| CorpusError::InvalidEncoding(format!("{what}: {e}")))
    };
    Ok((
        decode(raw_source.as_ref(), "source")?,
        decode(raw_target.as_ref(), "target")?,
    ))
}

/// Map a label token under `scheme`. Anything outside the scheme's two tokens is an error.
pub fn map_label(token: &str, scheme: LabelScheme) -> Result<Label, CorpusError> {
    match (scheme, token) {
        (LabelScheme::Native, "ERR") | (LabelScheme::OkBad, "BAD") => Ok(Label::Err),
        (LabelScheme::Native, "NOT") | (LabelScheme::OkBad, "OK") => Ok(Label::Not),
        _ => Err(CorpusError::UnknownLabel(token.to_string())),
    }
}

pub const TSV_HEADER: &str = "id\tsource\ttarget\tlabel";
pub const TSV_HEADER_WITH_CATEGORY: &str = "id\tsource\ttarget\tlabel\tcategory";

#[derive(Deserialize, Serialize)]
struct JsonRecord {
    id: String,
    source: String,
    target: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

/// Load a dataset file. The dataset name is the file stem.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: Format,
    scheme: LabelScheme,
    split: Split,
) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_dataset(&bytes, &name, split, format, scheme)
}

/// Parse dataset bytes. Row numbers in errors are 1-based physical line numbers.
pub fn parse_dataset(
    bytes: &[u8],
    name: &str,
    split: Split,
    format: Format,
    scheme: LabelScheme,
) -> Result<Dataset, CorpusError> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    let mut has_category_column = false;

    for (idx, raw_line) in bytes.split(|&b| b == b'\n').enumerate() {
        let row = idx + 1;
        let line = std::str::from_utf8(raw_line)
            .map_err(|e| CorpusError::InvalidEncoding(format!("row {row}: {e}")))?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let record = match format {
            Format::Tsv => {
                if idx == 0 {
                    has_category_column = match line {
                        TSV_HEADER => false,
                        TSV_HEADER_WITH_CATEGORY => true,
                        other => {
                            return Err(CorpusError::MalformedRow {
                                row,
                                message: format!("unexpected header {other:?}"),
                            })
                        }
                    };
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                let expected = if has_category_column { 5 } else { 4 };
                if cols.len() != expected {
                    return Err(CorpusError::MalformedRow {
                        row,
                        message: format!("expected {expected} columns, found {}", cols.len()),
                    });
                }
                JsonRecord {
                    id: cols[0].to_string(),
                    source: cols[1].to_string(),
                    target: cols[2].to_string(),
                    label: cols[3].to_string(),
                    category: cols.get(4).map(|c| c.to_string()),
                }
            }
            Format::Jsonl => serde_json::from_str(line).map_err(|e| CorpusError::MalformedRow {
                row,
                message: e.to_string(),
            })?,
        };
        let pair = record_to_pair(record, scheme, row)?;
        if !seen.insert(pair.id.clone()) {
            return Err(CorpusError::DuplicateId { row, id: pair.id });
        }
        pairs.push(pair);
    }

    if pairs.is_empty() {
        return Err(CorpusError::NoRecords);
    }
    Ok(Dataset {
        name: name.to_string(),
        split,
        pairs,
        label_scheme: scheme,
    })
}

fn record_to_pair(rec: JsonRecord, scheme: LabelScheme, row: usize) -> Result<Pair, CorpusError> {
    let malformed = |message: String| CorpusError::MalformedRow { row, message };
    let id = rec.id.trim().to_string();
    if id.is_empty() {
        return Err(malformed("empty id".into()));
    }
    let (source, target) = normalize_pair(&rec.source, &rec.target)?;
    if source.is_empty() || target.is_empty() {
        return Err(malformed(
            "empty source or target after normalization".into(),
        ));
    }
    let gold = map_label(rec.label.trim(), scheme)?;
    let category = match rec.category.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(tok) => Some(tok.parse::<ErrorCategory>()?),
    };
    if let (Some(c), Label::Not) = (category, gold) {
        return Err(malformed(format!("category {c} on a non-ERR pair")));
    }
    Ok(Pair {
        id,
        source,
        target,
        gold: Some(gold),
        category,
    })
}

/// Serialize a dataset in `format`, spelling labels with the dataset's own scheme.
///
/// TSV output includes the category column only when some pair carries a category.
pub fn write_dataset(dataset: &Dataset, format: Format) -> String {
    let scheme = dataset.label_scheme;
    let label_token = |p: &Pair| p.gold.map(|g| scheme.token(g)).unwrap_or("");
    let mut out = String::new();
    match format {
        Format::Tsv => {
            let with_cat = dataset.pairs.iter().any(|p| p.category.is_some());
            out.push_str(if with_cat {
                TSV_HEADER_WITH_CATEGORY
            } else {
                TSV_HEADER
            });
            out.push('\n');
            for p in &dataset.pairs {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}",
                    p.id,
                    p.source,
                    p.target,
                    label_token(p)
                ));
                if with_cat {
                    out.push('\t');
                    out.push_str(p.category.map(|c| c.as_str()).unwrap_or(""));
                }
                out.push('\n');
            }
        }
        Format::Jsonl => {
            for p in &dataset.pairs {
                let rec = JsonRecord {
                    id: p.id.clone(),
                    source: p.source.clone(),
                    target: p.target.clone(),
                    label: label_token(p).to_string(),
                    category: p.category.map(|c| c.as_str().to_string()),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
    }
    out
}

/// One (source, target) pair present in both splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub train_id: String,
    pub dev_id: String,
    pub source: String,
    pub target: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub leaks: Vec<Leak>,
}

impl LeakReport {
    pub fn is_clean(&self) -> bool {
        self.leaks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.leaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaks.is_empty()
    }
}

/// Exact-match leakage on the normalized (source, target) tuple.
pub fn check_leakage(train: &Dataset, dev: &Dataset) -> LeakReport {
    let mut index: HashMap<(String, String), Vec<&str>> = HashMap::new();
    for p in &train.pairs {
        index
            .entry((normalize_text(&p.source), normalize_text(&p.target)))
            .or_default()
            .push(&p.id);
    }
    let mut leaks = Vec::new();
    for d in &dev.pairs {
        let key = (normalize_text(&d.source), normalize_text(&d.target));
        if let Some(train_ids) = index.get(&key) {
            for train_id in train_ids {
                leaks.push(Leak {
                    train_id: train_id.to_string(),
                    dev_id: d.id.clone(),
                    source: key.0.clone(),
                    target: key.1.clone(),
                });
            }
        }
    }
    LeakReport { leaks }
}

pub fn split_stats(dataset: &Dataset) -> LabelDistribution {
    dataset
        .pairs
        .iter()
        .fold(LabelDistribution::default(), |mut acc, p| {
            match p.gold {
                Some(Label::Err) => acc.n_err += 1,
                Some(Label::Not) => acc.n_not += 1,
                None => {}
            }
            acc
        })
}
