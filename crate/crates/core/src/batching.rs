//! Sequence formatting, truncation and batch-wise dynamic padding.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text_normalize::{normalize, NormConfig};
use crate::tokenizer::{encode, TokenId, Vocab, CLS_ID, PAD_ID, SEP_ID};

/// Upper bound on sequence length used throughout the pipeline.
pub const MAX_SEQUENCE_LENGTH: usize = 128;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchError {
    #[error("example {id}: {domain} rows need a second text field")]
    MissingField { id: usize, domain: Domain },
    #[error("maximum length must be at least 2, got {0}")]
    InvalidLength(usize),
    #[error("cannot build a batch from zero sequences")]
    EmptyBatch,
    #[error("sequence {index} has length {len}, above the cap {cap}")]
    TooLong { index: usize, len: usize, cap: usize },
    #[error("{seqs} sequences but {labels} labels")]
    LabelCount { seqs: usize, labels: usize },
    #[error("sequence {0} does not start with [CLS]")]
    MissingCls(usize),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Commonsense,
    Justice,
    Virtue,
    Deontology,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Commonsense, Domain::Justice, Domain::Virtue, Domain::Deontology];

    /// Virtue pairs a scenario with a trait, deontology a request with an excuse.
    pub fn has_pair(self) -> bool {
        matches!(self, Domain::Virtue | Domain::Deontology)
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Commonsense => "commonsense",
            Domain::Justice => "justice",
            Domain::Virtue => "virtue",
            Domain::Deontology => "deontology",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "commonsense" | "cm" => Ok(Domain::Commonsense),
            "justice" => Ok(Domain::Justice),
            "virtue" => Ok(Domain::Virtue),
            "deontology" => Ok(Domain::Deontology),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

/// One labeled row. `id` is the zero-based data-row index in its source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub domain: Domain,
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: u8,
}

/// Token ids of one formatted example, ready for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub id: usize,
    pub ids: Vec<TokenId>,
    pub label: u8,
}

/// `[CLS] a [SEP]` for single-text domains, `[CLS] a [SEP] b [SEP]` for pairs.
pub fn format_sequence(ex: &Example, vocab: &Vocab) -> Result<Vec<TokenId>, BatchError> {
    let mut ids = vec![CLS_ID];
    ids.extend(encode(&ex.text_a, vocab));
    ids.push(SEP_ID);
    if ex.domain.has_pair() {
        let b = ex.text_b.as_deref().ok_or(BatchError::MissingField {
            id: ex.id,
            domain: ex.domain,
        })?;
        ids.extend(encode(b, vocab));
        ids.push(SEP_ID);
    }
    Ok(ids)
}

/// Keeps the head of the sequence; if anything was cut the last kept id becomes `[SEP]`.
pub fn truncate(mut ids: Vec<TokenId>, max_len: usize) -> Result<Vec<TokenId>, BatchError> {
    if max_len < 2 {
        return Err(BatchError::InvalidLength(max_len));
    }
    if ids.len() > max_len {
        ids.truncate(max_len);
        ids[max_len - 1] = SEP_ID;
    }
    Ok(ids)
}

/// Fixed-shape model input: `ids` and `mask` are row-major `batch_size x seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<TokenId>,
    pub mask: Vec<u8>,
    pub labels: Vec<u8>,
    pub example_ids: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn mask_row(&self, i: usize) -> &[u8] {
        &self.mask[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Number of unpadded positions in row `i`.
    pub fn row_len(&self, i: usize) -> usize {
        self.mask_row(i).iter().map(|&m| m as usize).sum()
    }

    /// A copy with `extra` masked `[PAD]` columns appended to every row.
    pub fn with_extra_padding(&self, extra: usize) -> TokenBatch {
        let seq_len = self.seq_len + extra;
        let mut ids = Vec::with_capacity(self.batch_size * seq_len);
        let mut mask = Vec::with_capacity(self.batch_size * seq_len);
        for i in 0..self.batch_size {
            ids.extend_from_slice(self.row(i));
            ids.extend(std::iter::repeat_n(PAD_ID, extra));
            mask.extend_from_slice(self.mask_row(i));
            mask.extend(std::iter::repeat_n(0, extra));
        }
        TokenBatch {
            ids,
            mask,
            labels: self.labels.clone(),
            example_ids: self.example_ids.clone(),
            batch_size: self.batch_size,
            seq_len,
        }
    }
}

/// Right-pads every sequence to the longest one in the batch (capped at `cap`).
pub fn pad_batch(seqs: &[Vec<TokenId>], labels: &[u8], cap: usize) -> Result<TokenBatch, BatchError> {
    if seqs.is_empty() {
        return Err(BatchError::EmptyBatch);
    }
    if seqs.len() != labels.len() {
        return Err(BatchError::LabelCount {
            seqs: seqs.len(),
            labels: labels.len(),
        });
    }
    for (index, s) in seqs.iter().enumerate() {
        if s.len() > cap {
            return Err(BatchError::TooLong { index, len: s.len(), cap });
        }
        if s.first() != Some(&CLS_ID) {
            return Err(BatchError::MissingCls(index));
        }
    }
    let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0).min(cap);
    let mut ids = Vec::with_capacity(seqs.len() * seq_len);
    let mut mask = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD_ID, seq_len - s.len()));
        mask.extend(std::iter::repeat_n(1u8, s.len()));
        mask.extend(std::iter::repeat_n(0u8, seq_len - s.len()));
    }
    Ok(TokenBatch {
        ids,
        mask,
        labels: labels.to_vec(),
        example_ids: (0..seqs.len()).collect(),
        batch_size: seqs.len(),
        seq_len,
    })
}

/// Formats and truncates every example.
pub fn encode_examples(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedExample>, BatchError> {
    examples
        .iter()
        .map(|ex| {
            Ok(EncodedExample {
                id: ex.id,
                ids: truncate(format_sequence(ex, vocab)?, max_len)?,
                label: ex.label,
            })
        })
        .collect()
}

/// Normalizes both text fields, then formats and truncates.
pub fn prepare_examples(
    examples: &[Example],
    norm: &NormConfig,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<EncodedExample>, BatchError> {
    let normalized: Vec<Example> = examples
        .iter()
        .map(|ex| Example {
            text_a: normalize(&ex.text_a, norm),
            text_b: ex.text_b.as_deref().map(|b| normalize(b, norm)),
            ..ex.clone()
        })
        .collect();
    encode_examples(&normalized, vocab, max_len)
}

/// Seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Chunks `order` into padded batches. The final partial batch is kept.
pub fn batches_in_order(
    encoded: &[EncodedExample],
    order: &[usize],
    batch_size: usize,
    cap: usize,
) -> Result<Vec<TokenBatch>, BatchError> {
    if batch_size == 0 {
        return Err(BatchError::InvalidBatchSize);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|&i| encoded[i].ids.clone()).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| encoded[i].label).collect();
            let mut batch = pad_batch(&seqs, &labels, cap)?;
            batch.example_ids = chunk.iter().map(|&i| encoded[i].id).collect();
            Ok(batch)
        })
        .collect()
}

/// Shuffles examples with a seeded permutation and chunks them into batches.
pub fn make_batches(
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<TokenBatch>, BatchError> {
    let encoded = encode_examples(examples, vocab, MAX_SEQUENCE_LENGTH)?;
    let order = shuffled_order(encoded.len(), shuffle_seed);
    batches_in_order(&encoded, &order, batch_size, MAX_SEQUENCE_LENGTH)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::from_tokens(["a", "b", "c"]).unwrap()
    }

    fn example(domain: Domain, a: &str, b: Option<&str>) -> Example {
        Example {
            id: 0,
            domain,
            text_a: a.into(),
            text_b: b.map(Into::into),
            label: 1,
        }
    }

    #[test]
    fn single_and_pair_templates() {
        let v = vocab();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(
            format_sequence(&example(Domain::Justice, "a b", None), &v).unwrap(),
            vec![CLS_ID, a, b, SEP_ID]
        );
        assert_eq!(
            format_sequence(&example(Domain::Virtue, "a", Some("b")), &v).unwrap(),
            vec![CLS_ID, a, SEP_ID, b, SEP_ID]
        );
        assert_eq!(
            format_sequence(&example(Domain::Deontology, "a", None), &v).unwrap_err(),
            BatchError::MissingField {
                id: 0,
                domain: Domain::Deontology
            }
        );
    }

    #[test]
    fn truncation() {
        let mut long = vec![CLS_ID];
        long.extend(std::iter::repeat_n(7, 199));
        let cut = truncate(long, 128).unwrap();
        assert_eq!(cut.len(), 128);
        assert_eq!(cut[0], CLS_ID);
        assert_eq!(*cut.last().unwrap(), SEP_ID);
        assert!(cut[1..127].iter().all(|&i| i == 7));

        let short: Vec<TokenId> = (0..10).map(|i| if i == 0 { CLS_ID } else { 6 }).collect();
        assert_eq!(truncate(short.clone(), 128).unwrap(), short);
        assert_eq!(truncate(short, 1).unwrap_err(), BatchError::InvalidLength(1));
    }

    fn seq(len: usize) -> Vec<TokenId> {
        let mut s = vec![CLS_ID];
        s.extend(std::iter::repeat_n(5, len.saturating_sub(2)));
        if len > 1 {
            s.push(SEP_ID);
        }
        s
    }

    #[test]
    fn dynamic_padding() {
        let b = pad_batch(&[seq(4), seq(7), seq(5)], &[0, 1, 0], 128).unwrap();
        assert_eq!(b.seq_len, 7);
        assert_eq!(&b.row(0)[4..], &[PAD_ID; 3]);
        assert_eq!(b.mask_row(0), &[1, 1, 1, 1, 0, 0, 0]);
        assert_eq!((0..3).map(|i| b.row_len(i)).collect::<Vec<_>>(), [4, 7, 5]);

        let full = pad_batch(&[seq(128)], &[1], 128).unwrap();
        assert_eq!(full.seq_len, 128);
        assert!(full.mask.iter().all(|&m| m == 1));

        assert_eq!(pad_batch(&[], &[], 128).unwrap_err(), BatchError::EmptyBatch);
        assert!(matches!(pad_batch(&[seq(9)], &[1], 8), Err(BatchError::TooLong { .. })));
    }

    #[test]
    fn padding_mirrors_eight_to_twelve() {
        let b = pad_batch(&[seq(8), seq(12)], &[0, 1], 128).unwrap();
        assert_eq!(b.row(0).iter().filter(|&&i| i == PAD_ID).count(), 4);
    }

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|id| Example {
                id,
                domain: Domain::Justice,
                text_a: "a b c".repeat(1 + id % 3),
                text_b: None,
                label: (id % 2) as u8,
            })
            .collect()
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let v = vocab();
        let ex = examples(70);
        let batches = make_batches(&ex, &v, 32, 9).unwrap();
        assert_eq!(batches.iter().map(|b| b.batch_size).collect::<Vec<_>>(), [32, 32, 6]);
        assert_eq!(make_batches(&ex, &v, 32, 9).unwrap(), batches);
        assert_eq!(make_batches(&ex, &v, 0, 9).unwrap_err(), BatchError::InvalidBatchSize);
    }

    #[test]
    fn seeds_give_different_permutations() {
        let base = shuffled_order(10, 0);
        let differing = (1..=100u64).filter(|&s| shuffled_order(10, s) != base).count();
        assert!(differing >= 99, "only {differing} of 100 seeds differ");
        let same_pair = (0..100u64).filter(|&s| shuffled_order(2, s) == shuffled_order(2, s + 1000)).count();
        assert!(same_pair < 100);
    }

    proptest! {
        #[test]
        fn padded_batch_invariants(lens in prop::collection::vec(2usize..200, 1..12)) {
            let seqs: Vec<Vec<TokenId>> = lens.iter().map(|&l| truncate(seq(l), MAX_SEQUENCE_LENGTH).unwrap()).collect();
            let labels = vec![0u8; seqs.len()];
            let b = pad_batch(&seqs, &labels, MAX_SEQUENCE_LENGTH).unwrap();
            prop_assert!(b.seq_len <= MAX_SEQUENCE_LENGTH);
            let longest = seqs.iter().map(Vec::len).max().unwrap();
            prop_assert_eq!(b.seq_len, longest);
            for (i, s) in seqs.iter().enumerate() {
                prop_assert_eq!(b.row_len(i), s.len());
                prop_assert_eq!(b.row(i)[0], CLS_ID);
                prop_assert!(b.row(i)[..s.len()].contains(&SEP_ID));
                for (id, m) in b.row(i).iter().zip(b.mask_row(i)) {
                    prop_assert_eq!(*m == 1, *id != PAD_ID);
                }
            }
        }
    }
}
