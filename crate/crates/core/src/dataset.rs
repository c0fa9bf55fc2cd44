//! Loading ETHICS-style CSV splits.
//!
//! Each domain is described by a [`DomainSpec`]: which file holds a split,
//! which column is the label and which columns carry the text. The default
//! specs follow the public ETHICS layout:
//!
//! | domain      | file                          | columns                          |
//! |-------------|-------------------------------|----------------------------------|
//! | commonsense | `commonsense/cm_<split>.csv`  | `label,input,is_short,edited`    |
//! | justice     | `justice/justice_<split>.csv` | `label,scenario`                 |
//! | virtue      | `virtue/virtue_<split>.csv`   | `label,scenario` (`text [SEP] trait`) |
//! | deontology  | `deontology/deontology_<split>.csv` | `label,scenario,excuse`    |

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::batching::{Domain, Example};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}, line {line}: label {value:?} is not 0 or 1")]
    BadLabel { path: String, line: u64, value: String },
    #[error("{path}, line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: String,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}, line {line}: no {separator:?} separating the packed fields")]
    MissingSeparator { path: String, line: u64, separator: String },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("domain spec line {line}: {message}")]
    BadSpec { line: usize, message: String },
    #[error("manifest line {line}: {message}")]
    BadManifest { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    TestHard,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::TestHard];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::TestHard => "test_hard",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "test_hard" | "hard" => Ok(Split::TestHard),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub domain: Domain,
    /// Directory under the data root; empty for files directly in the root.
    pub subdir: String,
    pub file_prefix: String,
    pub label_column: String,
    pub text_a_column: String,
    pub text_b_column: Option<String>,
    /// Splits `text_a` into `(text_a, text_b)` on the first occurrence.
    pub pack_separator: Option<String>,
}

const COMMONSENSE_SPEC: &str = include_str!("../data/domains/commonsense.spec");
const JUSTICE_SPEC: &str = include_str!("../data/domains/justice.spec");
const VIRTUE_SPEC: &str = include_str!("../data/domains/virtue.spec");
const DEONTOLOGY_SPEC: &str = include_str!("../data/domains/deontology.spec");

impl DomainSpec {
    /// The bundled spec for `domain`.
    pub fn default_for(domain: Domain) -> DomainSpec {
        let text = match domain {
            Domain::Commonsense => COMMONSENSE_SPEC,
            Domain::Justice => JUSTICE_SPEC,
            Domain::Virtue => VIRTUE_SPEC,
            Domain::Deontology => DEONTOLOGY_SPEC,
        };
        DomainSpec::parse(text).expect("bundled domain spec is valid")
    }

    /// Parses `key = value` lines. Values may be double-quoted to keep
    /// surrounding spaces; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<DomainSpec, DatasetError> {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |message: String| DatasetError::BadSpec { line: line_no, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key = value".into()))?;
            let key = k.trim();
            let value = unquote(v.trim()).ok_or_else(|| bad("unterminated quote".into()))?;
            if !matches!(
                key,
                "domain" | "subdir" | "file_prefix" | "label_column" | "text_a_column" | "text_b_column" | "pack_separator"
            ) {
                return Err(bad(format!("unknown key {key:?}")));
            }
            if map.insert(key, value).is_some() {
                return Err(bad(format!("duplicate key {key:?}")));
            }
        }
        let end = text.lines().count().max(1);
        let required = |key: &str| -> Result<String, DatasetError> {
            match map.get(key) {
                Some(v) if !v.is_empty() => Ok(v.clone()),
                _ => Err(DatasetError::BadSpec {
                    line: end,
                    message: format!("missing {key}"),
                }),
            }
        };
        let optional = |key: &str| map.get(key).filter(|v| !v.is_empty()).cloned();
        let domain: Domain = required("domain")?
            .parse()
            .map_err(|message| DatasetError::BadSpec { line: end, message })?;
        let spec = DomainSpec {
            domain,
            subdir: optional("subdir").unwrap_or_default(),
            file_prefix: required("file_prefix")?,
            label_column: required("label_column")?,
            text_a_column: required("text_a_column")?,
            text_b_column: optional("text_b_column"),
            pack_separator: optional("pack_separator"),
        };
        let second = spec.text_b_column.is_some() || spec.pack_separator.is_some();
        if spec.text_b_column.is_some() && spec.pack_separator.is_some() {
            return Err(DatasetError::BadSpec {
                line: end,
                message: "text_b_column and pack_separator are mutually exclusive".into(),
            });
        }
        if second != domain.has_pair() {
            return Err(DatasetError::BadSpec {
                line: end,
                message: format!(
                    "{domain} rows {} a second text field",
                    if domain.has_pair() { "need" } else { "must not have" }
                ),
            });
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "domain = {}\nsubdir = {}\nfile_prefix = {}\nlabel_column = {}\ntext_a_column = {}\n",
            self.domain, self.subdir, self.file_prefix, self.label_column, self.text_a_column
        );
        if let Some(b) = &self.text_b_column {
            out.push_str(&format!("text_b_column = {b}\n"));
        }
        if let Some(sep) = &self.pack_separator {
            out.push_str(&format!("pack_separator = \"{sep}\"\n"));
        }
        out
    }

    pub fn file_name(&self, split: Split) -> String {
        format!("{}_{}.csv", self.file_prefix, split.name())
    }

    /// `<root>/<subdir>/<prefix>_<split>.csv`, falling back to
    /// `<root>/<prefix>_<split>.csv` when the subdirectory form is absent.
    pub fn split_path(&self, root: &Path, split: Split) -> PathBuf {
        let nested = root.join(&self.subdir).join(self.file_name(split));
        if self.subdir.is_empty() || nested.exists() {
            return nested;
        }
        let flat = root.join(self.file_name(split));
        if flat.exists() {
            flat
        } else {
            nested
        }
    }
}

fn unquote(v: &str) -> Option<String> {
    if let Some(rest) = v.strip_prefix('"') {
        rest.strip_suffix('"').map(str::to_string)
    } else {
        Some(v.to_string())
    }
}

/// A parsed split with its original header and rows, kept so that a subset
/// can be written back in the input format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedSplit {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub examples: Vec<Example>,
}

impl LoadedSplit {
    /// CSV text holding the header and the rows whose example ids are in `ids`, in file order.
    pub fn subset_csv(&self, ids: &[usize]) -> Result<String, DatasetError> {
        let keep: std::collections::BTreeSet<usize> = ids.iter().copied().collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| DatasetError::Csv {
            path: "<subset>".into(),
            message: e.to_string(),
        };
        w.write_record(&self.header).map_err(to_err)?;
        for (ex, row) in self.examples.iter().zip(&self.rows) {
            if keep.contains(&ex.id) {
                w.write_record(row).map_err(to_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| DatasetError::Csv {
            path: "<subset>".into(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output of utf-8 fields is utf-8"))
    }
}

fn column(header: &[String], name: &str, path: &str) -> Result<usize, DatasetError> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DatasetError::MissingColumn {
            path: path.to_string(),
            column: name.to_string(),
        })
}

/// Parses CSV text. `origin` names the source in error messages.
pub fn parse_split(text: &[u8], spec: &DomainSpec, origin: &str) -> Result<LoadedSplit, DatasetError> {
    let csv_err = |e: csv::Error| DatasetError::Csv {
        path: origin.to_string(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text);
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim_start_matches('\u{feff}').to_string()).collect();
    let label_col = column(&header, &spec.label_column, origin)?;
    let a_col = column(&header, &spec.text_a_column, origin)?;
    let b_col = spec.text_b_column.as_deref().map(|c| column(&header, c, origin)).transpose()?;

    let mut rows = Vec::new();
    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DatasetError::RaggedRow {
                path: origin.to_string(),
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let raw_label = record[label_col].trim();
        let label = match raw_label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DatasetError::BadLabel {
                    path: origin.to_string(),
                    line,
                    value: other.to_string(),
                })
            }
        };
        let (text_a, text_b) = match (&spec.pack_separator, b_col) {
            (Some(sep), _) => {
                let (a, b) = record[a_col].split_once(sep.as_str()).ok_or_else(|| DatasetError::MissingSeparator {
                    path: origin.to_string(),
                    line,
                    separator: sep.clone(),
                })?;
                (a.to_string(), Some(b.to_string()))
            }
            (None, Some(b)) => (record[a_col].to_string(), Some(record[b].to_string())),
            (None, None) => (record[a_col].to_string(), None),
        };
        examples.push(Example {
            id: examples.len(),
            domain: spec.domain,
            text_a,
            text_b,
            label,
        });
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(LoadedSplit { header, rows, examples })
}

pub fn load_split(path: &Path, spec: &DomainSpec) -> Result<LoadedSplit, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_split(&bytes, spec, &path.display().to_string())
}

/// SHA-256 over a canonical serialization of the examples, hex encoded.
pub fn content_hash(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for ex in examples {
        h.update([ex.label]);
        h.update((ex.text_a.len() as u64).to_le_bytes());
        h.update(ex.text_a.as_bytes());
        match &ex.text_b {
            Some(b) => {
                h.update([1]);
                h.update((b.len() as u64).to_le_bytes());
                h.update(b.as_bytes());
            }
            None => h.update([0]),
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub count: usize,
    pub hash: Option<String>,
}

/// Expected split sizes (and optionally content hashes), keyed `<domain>/<split>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub entries: BTreeMap<String, ManifestEntry>,
}

const TABLE_COUNTS: &str = include_str!("../data/split_counts.manifest");

pub fn manifest_key(domain: Domain, split: Split) -> String {
    format!("{domain}/{split}")
}

impl SplitManifest {
    /// Published test and hard-test sizes of the four domains.
    pub fn published_counts() -> SplitManifest {
        SplitManifest::parse(TABLE_COUNTS).expect("bundled manifest is valid")
    }

    /// Lines of `<key> <count> [sha256]`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<SplitManifest, DatasetError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let bad = |message: String| DatasetError::BadManifest { line: i + 1, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (key, count, hash) = match fields.as_slice() {
                [k, c] => (*k, *c, None),
                [k, c, h] => (*k, *c, Some(*h)),
                _ => return Err(bad("expected `<key> <count> [hash]`".into())),
            };
            let count = count.parse().map_err(|_| bad(format!("{count:?} is not a count")))?;
            if let Some(h) = hash {
                if h.len() != 64 || !h.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(bad(format!("{h:?} is not a sha256 hex digest")));
                }
            }
            let entry = ManifestEntry {
                count,
                hash: hash.map(str::to_ascii_lowercase),
            };
            if entries.insert(key.to_string(), entry).is_some() {
                return Err(bad(format!("duplicate key {key:?}")));
            }
        }
        Ok(SplitManifest { entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, e) in &self.entries {
            match &e.hash {
                Some(h) => out.push_str(&format!("{k} {} {h}\n", e.count)),
                None => out.push_str(&format!("{k} {}\n", e.count)),
            }
        }
        out
    }

    pub fn record(&mut self, key: String, examples: &[Example]) {
        self.entries.insert(
            key,
            ManifestEntry {
                count: examples.len(),
                hash: Some(content_hash(examples)),
            },
        );
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCheck {
    pub key: String,
    pub observed: usize,
    pub expected: usize,
    pub hash_ok: Option<bool>,
}

impl SplitCheck {
    pub fn passed(&self) -> bool {
        self.observed == self.expected && self.hash_ok != Some(false)
    }

    pub fn delta(&self) -> i64 {
        self.observed as i64 - self.expected as i64
    }
}

impl fmt::Display for SplitCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: observed {} expected {} (delta {:+})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.key,
            self.observed,
            self.expected,
            self.delta()
        )?;
        match self.hash_ok {
            Some(true) => write!(f, ", hash ok"),
            Some(false) => write!(f, ", hash differs"),
            None => Ok(()),
        }
    }
}

/// Compares one split against its manifest entry, if there is one.
pub fn verify_split(key: &str, examples: &[Example], expected: &SplitManifest) -> Option<SplitCheck> {
    let entry = expected.entries.get(key)?;
    Some(SplitCheck {
        key: key.to_string(),
        observed: examples.len(),
        expected: entry.count,
        hash_ok: entry.hash.as_ref().map(|h| *h == content_hash(examples)),
    })
}

/// Checks every loaded split that the manifest knows about.
pub fn verify_manifest(loaded: &BTreeMap<String, Vec<Example>>, expected: &SplitManifest) -> Vec<SplitCheck> {
    loaded
        .iter()
        .filter_map(|(key, examples)| verify_split(key, examples, expected))
        .collect()
}
