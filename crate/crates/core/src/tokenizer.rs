//! WordPiece vocabulary training, greedy longest-match encoding and decoding.
//!
//! Training starts from single characters (word-initial `c` and continuation
//! `##c` forms are separate symbols) and repeatedly merges the adjacent pair
//! with the best likelihood gain `count(ab) / (count(a) * count(b))` among
//! pairs seen at least `min_frequency` times. Ties go to the
//! lexicographically smallest `(left, right)` pair so training is
//! deterministic.
//!
//! The vocabulary file is one token per line; the line number is the id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const MASK_ID: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const CONTINUATION_PREFIX: &str = "##";
pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("training corpus contains no tokens")]
    EmptyCorpus,
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("duplicate token {token:?} on line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("malformed vocabulary: {0}")]
    MalformedVocab(String),
    #[error("vocabulary I/O on {path}: {kind}")]
    Io { path: String, kind: std::io::ErrorKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub min_frequency: u64,
    pub max_word_chars: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8000,
            min_frequency: 2,
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return Err(TokenizerError::InvalidConfig(format!(
                "vocab_size must exceed {}, got {}",
                SPECIAL_TOKENS.len(),
                self.vocab_size
            )));
        }
        if self.min_frequency < 1 {
            return Err(TokenizerError::InvalidConfig("min_frequency must be at least 1".into()));
        }
        if self.max_word_chars < 1 {
            return Err(TokenizerError::InvalidConfig("max_word_chars must be at least 1".into()));
        }
        Ok(())
    }
}

/// Subword inventory. Specials occupy ids `0..5`; ids are dense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    max_word_chars: usize,
}

impl Vocab {
    /// Builds a vocabulary from non-special tokens; specials are prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
            .collect();
        Self::from_list(all)
    }

    fn from_list(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(TokenizerError::MalformedVocab(format!(
                "{} tokens, the {} special tokens are missing",
                tokens.len(),
                SPECIAL_TOKENS.len()
            )));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(TokenizerError::MalformedVocab(format!(
                    "line {} must be {special}, found {:?}",
                    i + 1,
                    tokens[i]
                )));
            }
        }
        if tokens.len() > TokenId::MAX as usize {
            return Err(TokenizerError::MalformedVocab("too many tokens".into()));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() || token == CONTINUATION_PREFIX || token.chars().any(char::is_whitespace) {
                return Err(TokenizerError::MalformedVocab(format!(
                    "line {}: invalid token {token:?}",
                    i + 1
                )));
            }
            if id_of.insert(token.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::DuplicateToken {
                    token: token.clone(),
                    line: i + 1,
                });
            }
        }
        Ok(Self {
            tokens,
            id_of,
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        })
    }

    pub fn with_max_word_chars(mut self, max_word_chars: usize) -> Self {
        self.max_word_chars = max_word_chars;
        self
    }

    pub fn max_word_chars(&self) -> usize {
        self.max_word_chars
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    /// One token per line, each terminated by `\n`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        Self::from_list(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| TokenizerError::Io {
            path: path.display().to_string(),
            kind: e.kind(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| TokenizerError::Io {
            path: path.display().to_string(),
            kind: e.kind(),
        })?;
        let text = String::from_utf8(bytes).map_err(|_| TokenizerError::MalformedVocab("file is not UTF-8".into()))?;
        Self::from_text(&text)
    }
}

pub fn save_vocab(vocab: &Vocab, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
    vocab.save(path)
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab, TokenizerError> {
    Vocab::load(path)
}

/// A merge performed during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRecord {
    pub left: String,
    pub right: String,
    pub merged: String,
    /// Number of adjacent `(left, right)` occurrences in the corpus when merged.
    pub count: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedVocab {
    pub vocab: Vocab,
    pub alphabet: Vec<String>,
    pub merges: Vec<MergeRecord>,
}

const BARRIER: u32 = u32::MAX;

struct MergeState {
    symbols: Vec<String>,
    words: Vec<Vec<u32>>,
    freqs: Vec<u64>,
    symbol_counts: Vec<u64>,
    pair_counts: HashMap<(u32, u32), u64>,
    pair_words: HashMap<(u32, u32), HashSet<usize>>,
}

impl MergeState {
    fn add_word(&mut self, w: usize, sign: bool) {
        let freq = self.freqs[w];
        let word = &self.words[w];
        for &s in word {
            if s != BARRIER {
                let c = &mut self.symbol_counts[s as usize];
                *c = if sign { *c + freq } else { *c - freq };
            }
        }
        for pair in word.windows(2) {
            if pair[0] == BARRIER || pair[1] == BARRIER {
                continue;
            }
            let key = (pair[0], pair[1]);
            let c = self.pair_counts.entry(key).or_insert(0);
            if sign {
                *c += freq;
                self.pair_words.entry(key).or_default().insert(w);
            } else {
                *c -= freq;
                if *c == 0 {
                    self.pair_counts.remove(&key);
                    self.pair_words.remove(&key);
                }
            }
        }
    }

    fn best_pair(&self, min_frequency: u64) -> Option<((u32, u32), u64)> {
        let mut best: Option<((u32, u32), u64)> = None;
        for (&(a, b), &count) in &self.pair_counts {
            if count < min_frequency {
                continue;
            }
            let better = match best {
                None => true,
                Some(((ba, bb), bcount)) => {
                    let lhs = count as u128 * self.symbol_counts[ba as usize] as u128 * self.symbol_counts[bb as usize] as u128;
                    let rhs = bcount as u128 * self.symbol_counts[a as usize] as u128 * self.symbol_counts[b as usize] as u128;
                    lhs > rhs
                        || (lhs == rhs
                            && (self.symbols[a as usize].as_str(), self.symbols[b as usize].as_str())
                                < (self.symbols[ba as usize].as_str(), self.symbols[bb as usize].as_str()))
                }
            };
            if better {
                best = Some(((a, b), count));
            }
        }
        best
    }

    fn apply(&mut self, (a, b): (u32, u32), merged: u32) {
        let mut affected: Vec<usize> = self.pair_words.get(&(a, b)).map(|s| s.iter().copied().collect()).unwrap_or_default();
        affected.sort_unstable();
        for w in affected {
            self.add_word(w, false);
            let old = std::mem::take(&mut self.words[w]);
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == a && old[i + 1] == b {
                    new.push(merged);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            self.words[w] = new;
            self.add_word(w, true);
        }
    }
}

/// Trains a vocabulary and returns it with the merge log.
pub fn train_vocab_with_stats<S: AsRef<str>>(corpus: &[S], cfg: &TokenizerConfig) -> Result<TrainedVocab, TokenizerError> {
    cfg.validate()?;
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for line in corpus {
        for word in line.as_ref().split_whitespace() {
            *word_freq.entry(word).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut char_counts: BTreeMap<char, u64> = BTreeMap::new();
    let mut form_counts: BTreeMap<String, u64> = BTreeMap::new();
    for (word, &freq) in &word_freq {
        for (i, c) in word.chars().enumerate() {
            *char_counts.entry(c).or_insert(0) += freq;
            *form_counts.entry(char_form(c, i > 0)).or_insert(0) += freq;
        }
    }
    let budget = cfg.vocab_size - SPECIAL_TOKENS.len();
    let mut alphabet: Vec<(String, u64)> = form_counts
        .into_iter()
        .filter(|(form, _)| {
            let c = form.trim_start_matches(CONTINUATION_PREFIX).chars().next();
            c.is_some_and(|c| char_counts[&c] >= cfg.min_frequency)
        })
        .collect();
    alphabet.sort_by(|(sa, ca), (sb, cb)| cb.cmp(ca).then_with(|| sa.cmp(sb)));
    alphabet.truncate(budget);
    let alphabet: Vec<String> = alphabet.into_iter().map(|(s, _)| s).collect();

    let mut symbol_id: HashMap<String, u32> = HashMap::new();
    let mut symbols = Vec::new();
    for s in &alphabet {
        symbol_id.insert(s.clone(), symbols.len() as u32);
        symbols.push(s.clone());
    }
    let mut state = MergeState {
        symbol_counts: vec![0; symbols.len()],
        symbols,
        words: Vec::with_capacity(word_freq.len()),
        freqs: Vec::with_capacity(word_freq.len()),
        pair_counts: HashMap::new(),
        pair_words: HashMap::new(),
    };
    for (word, &freq) in &word_freq {
        let encoded = word
            .chars()
            .enumerate()
            .map(|(i, c)| symbol_id.get(&char_form(c, i > 0)).copied().unwrap_or(BARRIER))
            .collect();
        state.words.push(encoded);
        state.freqs.push(freq);
        state.add_word(state.words.len() - 1, true);
    }

    let mut vocab_tokens: Vec<String> = alphabet.clone();
    let mut in_vocab: HashSet<String> = alphabet.iter().cloned().collect();
    let mut merges = Vec::new();
    while vocab_tokens.len() < budget {
        let Some(((a, b), count)) = state.best_pair(cfg.min_frequency) else {
            break;
        };
        let left = state.symbols[a as usize].clone();
        let right = state.symbols[b as usize].clone();
        let merged = format!("{left}{}", right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(&right));
        let merged_id = match symbol_id.get(&merged) {
            Some(&id) => id,
            None => {
                let id = state.symbols.len() as u32;
                symbol_id.insert(merged.clone(), id);
                state.symbols.push(merged.clone());
                state.symbol_counts.push(0);
                id
            }
        };
        state.apply((a, b), merged_id);
        let admissible = merged != CONTINUATION_PREFIX && !SPECIAL_TOKENS.contains(&merged.as_str());
        if admissible && in_vocab.insert(merged.clone()) {
            vocab_tokens.push(merged.clone());
        }
        merges.push(MergeRecord { left, right, merged, count });
    }

    let vocab = Vocab::from_tokens(vocab_tokens)?.with_max_word_chars(cfg.max_word_chars);
    Ok(TrainedVocab { vocab, alphabet, merges })
}

pub fn train_vocab<S: AsRef<str>>(corpus: &[S], cfg: &TokenizerConfig) -> Result<Vocab, TokenizerError> {
    train_vocab_with_stats(corpus, cfg).map(|t| t.vocab)
}

fn char_form(c: char, continuation: bool) -> String {
    if continuation {
        format!("{CONTINUATION_PREFIX}{c}")
    } else {
        c.to_string()
    }
}

/// Greedy longest-match-first segmentation of one whitespace-free word.
///
/// Returns `[UNK]` when the word is longer than the vocabulary's
/// `max_word_chars` or when some position has no matching piece.
pub fn encode_word(word: &str, vocab: &Vocab) -> Vec<TokenId> {
    let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain(std::iter::once(word.len())).collect();
    let n_chars = bounds.len() - 1;
    if n_chars == 0 {
        return Vec::new();
    }
    if n_chars > vocab.max_word_chars {
        return vec![UNK_ID];
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + 2);
    while start < n_chars {
        let mut found = None;
        for end in (start + 1..=n_chars).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&candidate).filter(|&id| id as usize >= SPECIAL_TOKENS.len()) {
                found = Some((id, end));
                break;
            }
        }
        let Some((id, end)) = found else {
            return vec![UNK_ID];
        };
        out.push(id);
        start = end;
    }
    out
}

/// Whitespace-splits `text` and segments every word; no specials are added.
pub fn encode(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    text.split_whitespace().flat_map(|w| encode_word(w, vocab)).collect()
}

pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: vocab.len() })?;
        match token.strip_prefix(CONTINUATION_PREFIX) {
            Some(rest) => out.push_str(rest),
            None => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
    }
    Ok(out)
}
