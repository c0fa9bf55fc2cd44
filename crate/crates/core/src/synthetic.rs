//! Token-level synthetic datasets for sanity checks.
//!
//! Rows are `[CLS] filler... signal filler... [SEP]` where the signal token
//! decides the label. The hard-filter fixture flips a fraction of labels so
//! that a model trained on the clean signal systematically misjudges them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batching::EncodedExample;
use crate::tokenizer::{TokenId, CLS_ID, SEP_ID, SPECIAL_TOKENS};

pub const FILLER_TOKENS: usize = 16;
/// Vocabulary size needed by the generated ids.
pub const VOCAB_SIZE: usize = SPECIAL_TOKENS.len() + FILLER_TOKENS + 2;
/// Longest generated row.
pub const MAX_ROW_LEN: usize = 10;

/// The noisy fixture repeats its signal token so small models pick it up
/// despite the flipped labels.
const NOISY_SIGNAL_COPIES: usize = 3;
const FIRST_FILLER: TokenId = SPECIAL_TOKENS.len() as TokenId;
const SIGNAL_NEG: TokenId = FIRST_FILLER + FILLER_TOKENS as TokenId;
const SIGNAL_POS: TokenId = SIGNAL_NEG + 1;

fn row(rng: &mut ChaCha8Rng, label: u8, copies: usize) -> Vec<TokenId> {
    let fillers = rng.random_range(3..=MAX_ROW_LEN - 2 - copies);
    let mut ids: Vec<TokenId> = (0..fillers)
        .map(|_| FIRST_FILLER + rng.random_range(0..FILLER_TOKENS as TokenId))
        .collect();
    for _ in 0..copies {
        let at = rng.random_range(0..=ids.len());
        ids.insert(at, if label == 1 { SIGNAL_POS } else { SIGNAL_NEG });
    }
    let mut out = vec![CLS_ID];
    out.extend(ids);
    out.push(SEP_ID);
    out
}

/// `n` rows, alternating labels, perfectly separable by the signal token.
pub fn separable(n: usize, seed: u64) -> Vec<EncodedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let label = (id % 2) as u8;
            EncodedExample {
                id,
                ids: row(&mut rng, label, 1),
                label,
            }
        })
        .collect()
}

/// Separable rows whose labels are flipped with probability `noise`.
/// Returns the rows and, per row, whether it was flipped.
pub fn noisy(n: usize, noise: f64, seed: u64) -> (Vec<EncodedExample>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flipped = Vec::with_capacity(n);
    let rows = (0..n)
        .map(|id| {
            let signal = (id % 2) as u8;
            let ids = row(&mut rng, signal, NOISY_SIGNAL_COPIES);
            let flip = rng.random_bool(noise);
            flipped.push(flip);
            EncodedExample {
                id,
                ids,
                label: if flip { 1 - signal } else { signal },
            }
        })
        .collect();
    (rows, flipped)
}
