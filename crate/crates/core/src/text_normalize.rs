//! Text normalization applied before tokenization.
//!
//! The pipeline is three stages run in a fixed order:
//!
//! 1. [`normalize_case`]: adaptive de-shouting. If any token is fully
//!    uppercase, longer than `allcaps_threshold` and not a whitelisted
//!    acronym, the text is treated as shouted and every non-whitelisted
//!    all-caps token is lowercased. Otherwise case is left alone, so
//!    `"Title IX"` and `"US"` keep their meaning.
//! 2. [`expand_contractions`]: table-driven expansion (`can't` -> `cannot`),
//!    preserving a leading capital.
//! 3. [`strip_noise`]: drops characters outside the keep-set, collapses
//!    whitespace and trims.
//!
//! Stages 1 and 2 inspect tokens through the same character filter that
//! stage 3 applies, which makes [`normalize`] idempotent.
//!
//! The possessive / clitic `'s` is never expanded: it is ambiguous between
//! "is", "has" and a possessive.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

const DEFAULT_CONFIG: &str = include_str!("../data/norm.conf");

/// Punctuation kept by [`strip_noise`] in addition to letters, digits and whitespace.
pub const KEPT_PUNCTUATION: &str = ".,!?;:'\"-()";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: contraction key {key:?} must be lowercase and contain an apostrophe")]
    BadContractionKey { line: usize, key: String },
    #[error("line {line}: expansion {value:?} must be non-empty and free of apostrophes")]
    BadExpansion { line: usize, value: String },
    #[error("line {line}: acronym {entry:?} must be fully uppercase")]
    BadAcronym { line: usize, entry: String },
    #[error("allcaps_threshold must be at least 1")]
    BadThreshold,
    #[error("reading {path}: {kind}")]
    Io { path: String, kind: std::io::ErrorKind },
}

/// Parameters of the three normalization stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormConfig {
    pub acronym_whitelist: BTreeSet<String>,
    pub contraction_table: BTreeMap<String, String>,
    pub allcaps_threshold: usize,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("bundled normalization config is valid")
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Settings,
    Acronyms,
    Contractions,
}

impl NormConfig {
    /// Text of the bundled default configuration.
    pub fn default_text() -> &'static str {
        DEFAULT_CONFIG
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NormConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NormConfigError::Io {
            path: path.display().to_string(),
            kind: e.kind(),
        })?;
        Self::parse(&text)
    }

    /// Parses the sectioned key/value format of `data/norm.conf`.
    ///
    /// Blank lines and lines starting with `#` are ignored. `[settings]`
    /// holds `key = value` pairs, `[acronyms]` one entry per line and
    /// `[contractions]` `contraction = expansion` pairs.
    pub fn parse(text: &str) -> Result<Self, NormConfigError> {
        let mut cfg = NormConfig {
            acronym_whitelist: BTreeSet::new(),
            contraction_table: BTreeMap::new(),
            allcaps_threshold: 3,
        };
        let mut section = Section::None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: &str| NormConfigError::Syntax {
                line: line_no,
                message: message.to_string(),
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name.trim() {
                    "settings" => Section::Settings,
                    "acronyms" => Section::Acronyms,
                    "contractions" => Section::Contractions,
                    other => return Err(syntax(&format!("unknown section [{other}]"))),
                };
                continue;
            }
            match section {
                Section::None => return Err(syntax("entry outside of any section")),
                Section::Settings => {
                    let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
                    match key.trim() {
                        "allcaps_threshold" => {
                            cfg.allcaps_threshold = value
                                .trim()
                                .parse()
                                .map_err(|_| syntax("allcaps_threshold must be a non-negative integer"))?;
                        }
                        other => return Err(syntax(&format!("unknown setting {other:?}"))),
                    }
                }
                Section::Acronyms => {
                    if !is_fully_uppercase(line) || line.chars().any(char::is_whitespace) {
                        return Err(NormConfigError::BadAcronym {
                            line: line_no,
                            entry: line.to_string(),
                        });
                    }
                    cfg.acronym_whitelist.insert(line.to_string());
                }
                Section::Contractions => {
                    let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected contraction = expansion"))?;
                    let key = key.trim();
                    let value = value.trim();
                    if !key.contains('\'') || key != key.to_lowercase() || key.chars().any(char::is_whitespace) {
                        return Err(NormConfigError::BadContractionKey {
                            line: line_no,
                            key: key.to_string(),
                        });
                    }
                    if value.is_empty() || value.contains('\'') || value.chars().any(|c| !is_kept(c)) {
                        return Err(NormConfigError::BadExpansion {
                            line: line_no,
                            value: value.to_string(),
                        });
                    }
                    cfg.contraction_table.insert(key.to_string(), value.to_string());
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NormConfigError> {
        // Expansions such as "I would" introduce one-letter all-caps tokens;
        // a zero threshold would let them re-trigger de-shouting.
        if self.allcaps_threshold == 0 {
            return Err(NormConfigError::BadThreshold);
        }
        Ok(())
    }
}

fn is_fully_uppercase(s: &str) -> bool {
    s.chars().any(char::is_uppercase) && !s.chars().any(char::is_lowercase)
}

/// Characters kept by [`strip_noise`].
pub fn is_kept(c: char) -> bool {
    c.is_alphanumeric() || c.is_whitespace() || KEPT_PUNCTUATION.contains(c)
}

/// Maps a character the way [`strip_noise`] does; `None` means dropped.
fn clean_char(c: char) -> Option<char> {
    match c {
        '\u{2019}' | '\u{2018}' => Some('\''),
        c if is_kept(c) && !c.is_whitespace() => Some(c),
        _ => None,
    }
}

fn clean_token(token: &str) -> String {
    token.chars().filter_map(clean_char).collect()
}

/// Applies `f` to every maximal non-whitespace run, passing whitespace through.
fn map_tokens(text: &str, mut f: impl FnMut(&str) -> String) -> String {
    let mut out = String::with_capacity(text.len());
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push_str(&f(&text[s..i]));
            }
            out.push(c);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push_str(&f(&text[s..]));
    }
    out
}

fn token_core(cleaned: &str) -> &str {
    cleaned.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Adaptive case normalization (stage 1).
pub fn normalize_case(text: &str, cfg: &NormConfig) -> String {
    let shouted_candidate = |token: &str| -> Option<bool> {
        let cleaned = clean_token(token);
        let core = token_core(&cleaned);
        if !is_fully_uppercase(core) || cfg.acronym_whitelist.contains(core) {
            return None;
        }
        Some(core.chars().count() > cfg.allcaps_threshold)
    };
    let shouting = text.split_whitespace().any(|t| shouted_candidate(t) == Some(true));
    if !shouting {
        return text.to_string();
    }
    map_tokens(text, |token| match shouted_candidate(token) {
        Some(_) => token.to_lowercase(),
        None => token.to_string(),
    })
}

/// Contraction expansion (stage 2).
pub fn expand_contractions(text: &str, cfg: &NormConfig) -> String {
    map_tokens(text, |token| {
        let cleaned = clean_token(token);
        let is_edge = |c: char| !c.is_alphanumeric() && c != '\'';
        let body_start = cleaned.find(|c: char| !is_edge(c)).unwrap_or(cleaned.len());
        let body_end = cleaned.rfind(|c: char| !is_edge(c)).map_or(body_start, |i| {
            i + cleaned[i..].chars().next().map_or(0, char::len_utf8)
        });
        let body = &cleaned[body_start..body_end];
        let Some(expansion) = cfg.contraction_table.get(&body.to_lowercase()) else {
            return token.to_string();
        };
        let mut out = String::with_capacity(cleaned.len() + expansion.len());
        out.push_str(&cleaned[..body_start]);
        if body.chars().next().is_some_and(char::is_uppercase) {
            let mut chars = expansion.chars();
            if let Some(first) = chars.next() {
                out.extend(first.to_uppercase());
                out.push_str(chars.as_str());
            }
        } else {
            out.push_str(expansion);
        }
        out.push_str(&cleaned[body_end..]);
        out
    })
}

/// Noise removal (stage 3).
///
/// Keeps letters, digits and [`KEPT_PUNCTUATION`]; typographic single quotes
/// become `'`. Any whitespace run becomes one space, and the result is trimmed.
pub fn strip_noise(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        let Some(kept) = clean_char(c) else { continue };
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(kept);
    }
    out
}

/// Full normalization: case, then contractions, then noise.
pub fn normalize(text: &str, cfg: &NormConfig) -> String {
    strip_noise(&expand_contractions(&normalize_case(text, cfg), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> NormConfig {
        NormConfig::default()
    }

    #[test]
    fn default_config_contents() {
        let c = cfg();
        assert_eq!(c.allcaps_threshold, 3);
        let acronyms: Vec<_> = c.acronym_whitelist.iter().map(String::as_str).collect();
        assert_eq!(acronyms, ["AI", "IX", "OK", "TV", "UN", "US"]);
        assert_eq!(c.contraction_table.len(), 58);
        assert_eq!(c.contraction_table["can't"], "cannot");
        assert_eq!(c.contraction_table["won't"], "will not");
        assert!(c.contraction_table.keys().all(|k| !k.ends_with("'s") || k == "let's"));
    }

    #[test]
    fn case_examples() {
        assert_eq!(normalize_case("THIS IS WRONG about the US", &cfg()), "this is wrong about the US");
        assert_eq!(normalize_case("", &cfg()), "");
        assert_eq!(normalize_case("Title IX applies", &cfg()), "Title IX applies");
    }

    #[test]
    fn case_keeps_whitelisted_acronym_with_punctuation() {
        assert_eq!(normalize_case("STOP blaming the US.", &cfg()), "stop blaming the US.");
    }

    #[test]
    fn contraction_examples() {
        assert_eq!(expand_contractions("can't", &cfg()), "cannot");
        assert_eq!(expand_contractions("Can't stop", &cfg()), "Cannot stop");
        assert_eq!(expand_contractions("o'clock", &cfg()), "o'clock");
    }

    #[test]
    fn contraction_keeps_surrounding_punctuation() {
        assert_eq!(expand_contractions("(I'm sure, they're fine.)", &cfg()), "(I am sure, they are fine.)");
        assert_eq!(expand_contractions("won\u{2019}t", &cfg()), "will not");
        // possessives are not touched
        assert_eq!(expand_contractions("John's it's", &cfg()), "John's it's");
    }

    #[test]
    fn noise_examples() {
        assert_eq!(strip_noise("hello\t\tworld ☂"), "hello world");
        assert_eq!(strip_noise("He said, \"no!\""), "He said, \"no!\"");
        assert_eq!(strip_noise("  a  "), "a");
        assert_eq!(strip_noise("a\u{0}b\u{7f}c"), "abc");
    }

    #[test]
    fn pipeline_examples() {
        assert_eq!(normalize("can't   do THAT", &cfg()), "cannot do that");
        assert_eq!(normalize("", &cfg()), "");
        assert_eq!(normalize("I am here", &cfg()), "I am here");
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            NormConfig::parse("[contractions]\nCAN'T = cannot\n"),
            Err(NormConfigError::BadContractionKey { line: 2, .. })
        ));
        assert!(matches!(
            NormConfig::parse("[contractions]\ncant = cannot\n"),
            Err(NormConfigError::BadContractionKey { .. })
        ));
        assert!(matches!(NormConfig::parse("[acronyms]\nUs\n"), Err(NormConfigError::BadAcronym { .. })));
        assert!(matches!(NormConfig::parse("US\n"), Err(NormConfigError::Syntax { line: 1, .. })));
        assert!(matches!(NormConfig::parse("[colors]\n"), Err(NormConfigError::Syntax { .. })));
        assert_eq!(
            NormConfig::parse("[settings]\nallcaps_threshold = 0\n"),
            Err(NormConfigError::BadThreshold)
        );
        let custom = NormConfig::parse("[settings]\nallcaps_threshold = 5\n[acronyms]\nNASA\n").unwrap();
        assert_eq!(custom.allcaps_threshold, 5);
        assert!(custom.contraction_table.is_empty());
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        let pieces = prop_oneof![
            Just("CAN'T".to_string()),
            Just("can't".to_string()),
            Just("Won\u{2019}t".to_string()),
            Just("US".to_string()),
            Just("SHOUTING".to_string()),
            Just("I'M".to_string()),
            Just("\t".to_string()),
            Just("\u{85}".to_string()),
            Just("ǅ".to_string()),
            Just("İ".to_string()),
            "[a-zA-Z'’.,!?#@☂ ]{0,8}",
            any::<char>().prop_map(String::from),
        ];
        prop::collection::vec(pieces, 0..12).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(text in text_strategy()) {
            let c = cfg();
            let once = normalize(&text, &c);
            prop_assert_eq!(normalize(&once, &c), once);
        }

        #[test]
        fn normalize_is_stage_composition(text in text_strategy()) {
            let c = cfg();
            let staged = strip_noise(&expand_contractions(&normalize_case(&text, &c), &c));
            prop_assert_eq!(normalize(&text, &c), staged);
        }

        #[test]
        fn output_alphabet_is_keep_set(text in text_strategy()) {
            let out = normalize(&text, &cfg());
            prop_assert!(out.chars().all(|c| c == ' ' || (is_kept(c) && !c.is_whitespace())));
            prop_assert!(!out.contains("  "));
            prop_assert_eq!(out.trim(), out.as_str());
        }
    }
}
