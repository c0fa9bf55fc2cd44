//! Adversarial filtration: train small proxy classifiers on a development
//! set, score a pool by mean proxy cross-entropy and keep the hardest part.

use thiserror::Error;

use crate::batching::EncodedExample;
use crate::loss::bce_single;
use crate::model::ModelParams;
use crate::trainer::{evaluate, train, TrainConfig, TrainError};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("keep quantile {0} must lie strictly between 0 and 1")]
    QuantileOutOfRange(f64),
    #[error("need at least one proxy model")]
    NoProxies,
    #[error("{scores} scores for a pool of {pool}")]
    ScoreMismatch { scores: usize, pool: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub n_proxies: usize,
    /// Training setup shared by every proxy; proxy `i` uses `seed + i`.
    pub proxy: TrainConfig,
    pub keep_quantile: f64,
    pub seed: u64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_proxies < 1 {
            return Err(FilterError::NoProxies);
        }
        check_quantile(self.keep_quantile)?;
        self.proxy.validate()?;
        Ok(())
    }

    fn proxy_config(&self, i: usize) -> TrainConfig {
        let seed = self.seed.wrapping_add(i as u64);
        let mut cfg = self.proxy.clone();
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg
    }
}

fn check_quantile(q: f64) -> Result<(), FilterError> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(FilterError::QuantileOutOfRange(q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyScore {
    pub id: usize,
    pub score: f64,
}

/// Trains the proxies concurrently; the result does not depend on scheduling.
pub fn train_proxies(dev: &[EncodedExample], cfg: &FilterConfig) -> Result<Vec<ModelParams<f32>>, FilterError> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(FilterError::EmptyDataset);
    }
    let results: Vec<Result<ModelParams<f32>, TrainError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.n_proxies)
            .map(|i| {
                let pcfg = cfg.proxy_config(i);
                s.spawn(move || train::<f32>(dev, &[], &pcfg).map(|o| o.params))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("proxy training panicked")).collect()
    });
    results.into_iter().map(|r| r.map_err(FilterError::from)).collect()
}

/// Mean over proxies of the per-example clamped cross-entropy, in pool order.
pub fn score_examples<T: Scalar>(
    proxies: &[ModelParams<T>],
    cfg: &TrainConfig,
    pool: &[EncodedExample],
) -> Result<Vec<DifficultyScore>, FilterError> {
    if proxies.is_empty() {
        return Err(FilterError::NoProxies);
    }
    if pool.is_empty() {
        return Err(FilterError::EmptyDataset);
    }
    let mut totals = vec![0.0f64; pool.len()];
    for params in proxies {
        let out = evaluate(params, &cfg.model, pool, cfg.batch_size, cfg.max_len)?;
        for (t, &(_, p, y)) in totals.iter_mut().zip(&out.scores) {
            *t += bce_single(p, y);
        }
    }
    let k = proxies.len() as f64;
    Ok(pool
        .iter()
        .zip(totals)
        .map(|(ex, t)| DifficultyScore { id: ex.id, score: t / k })
        .collect())
}

/// Splits pool indices into `(hard, easy)`, both in pool order.
///
/// The threshold is the `floor(q * n)`-th smallest score (zero-based); every
/// example scoring at or above it is hard, so ties at the threshold are kept.
pub fn filter_hard(scores: &[DifficultyScore], q: f64) -> Result<(Vec<usize>, Vec<usize>), FilterError> {
    check_quantile(q)?;
    if scores.is_empty() {
        return Err(FilterError::EmptyDataset);
    }
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.score).collect();
    sorted.sort_by(f64::total_cmp);
    let k = ((q * scores.len() as f64).floor() as usize).min(scores.len() - 1);
    let threshold = sorted[k];
    let (hard, easy): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&i| scores[i].score >= threshold);
    Ok((hard, easy))
}

/// Mean score over the selected pool indices.
pub fn mean_score(scores: &[DifficultyScore], indices: &[usize]) -> f64 {
    indices.iter().map(|&i| scores[i].score).sum::<f64>() / indices.len() as f64
}

/// `example_id,score` lines with a header.
pub fn score_manifest_csv(scores: &[DifficultyScore]) -> String {
    let mut out = String::from("example_id,score\n");
    for s in scores {
        out.push_str(&format!("{},{:.9}\n", s.id, s.score));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::synthetic;

    fn scores(values: &[f64]) -> Vec<DifficultyScore> {
        values
            .iter()
            .enumerate()
            .map(|(id, &score)| DifficultyScore { id, score })
            .collect()
    }

    fn proxy_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            max_len: 16,
            model: ModelConfig {
                vocab_size: synthetic::VOCAB_SIZE,
                max_len: 16,
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                dropout_p: 0.1,
                hidden_dropout_p: 0.1,
                seed: 0,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn median_split_of_distinct_scores() {
        let s = scores(&[0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6, 0.0]);
        let (hard, easy) = filter_hard(&s, 0.5).unwrap();
        assert_eq!(hard.len(), 5);
        let min_hard = hard.iter().map(|&i| s[i].score).fold(f64::INFINITY, f64::min);
        assert!(easy.iter().all(|&i| s[i].score <= min_hard));
        assert_eq!(hard, vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn threshold_limits_and_ties() {
        let s = scores(&[0.3, 0.1, 0.2]);
        assert_eq!(filter_hard(&s, 1e-9).unwrap().0, vec![0, 1, 2]);
        let flat = scores(&[0.4; 6]);
        assert_eq!(filter_hard(&flat, 0.9).unwrap().0.len(), 6);
        assert_eq!(filter_hard(&s, 0.0).unwrap_err(), FilterError::QuantileOutOfRange(0.0));
        assert_eq!(filter_hard(&s, 1.0).unwrap_err(), FilterError::QuantileOutOfRange(1.0));
        assert_eq!(filter_hard(&[], 0.5).unwrap_err(), FilterError::EmptyDataset);
    }

    #[test]
    fn constant_proxy_scores_ln2() {
        let cfg = proxy_cfg(1);
        let mut p: ModelParams<f64> = init_params(&cfg.model).unwrap();
        p.head_w.fill(0.0);
        p.head_b.fill(0.0);
        let pool = synthetic::separable(6, 1);
        let s = score_examples(&[p], &cfg, &pool).unwrap();
        assert!(s.iter().all(|d| (d.score - std::f64::consts::LN_2).abs() < 1e-12));
    }

    #[test]
    fn confident_correct_proxy_scores_near_zero() {
        let cfg = proxy_cfg(1);
        let pool: Vec<EncodedExample> = synthetic::separable(6, 1).into_iter().map(|e| EncodedExample { label: 1, ..e }).collect();
        let mut p: ModelParams<f64> = init_params(&cfg.model).unwrap();
        p.head_w.fill(0.0);
        p.head_b.fill(100.0);
        let s = score_examples(&[p], &cfg, &pool).unwrap();
        assert!(s.iter().all(|d| d.score <= 2e-7 && d.score >= 0.0));
    }

    #[test]
    fn two_proxies_average() {
        // proxies with fixed probabilities give losses 0.2 and 0.6 on a positive row
        let cfg = proxy_cfg(1);
        let pool = vec![synthetic::separable(2, 3).remove(1)];
        assert_eq!(pool[0].label, 1);
        let with_prob = |target_loss: f64| {
            let mut p: ModelParams<f64> = init_params(&cfg.model).unwrap();
            let prob = (-target_loss).exp();
            p.head_w.fill(0.0);
            p.head_b.fill((prob / (1.0 - prob)).ln());
            p
        };
        let s = score_examples(&[with_prob(0.2), with_prob(0.6)], &cfg, &pool).unwrap();
        assert!((s[0].score - 0.4).abs() < 1e-12);
    }

    #[test]
    fn proxies_are_distinct_and_deterministic() {
        let dev = synthetic::separable(16, 2);
        let cfg = FilterConfig {
            n_proxies: 2,
            proxy: proxy_cfg(1),
            keep_quantile: 0.5,
            seed: 5,
        };
        let a = train_proxies(&dev, &cfg).unwrap();
        let b = train_proxies(&dev, &cfg).unwrap();
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
        assert_eq!(a, b);
        let one = train_proxies(&dev, &FilterConfig { n_proxies: 1, ..cfg.clone() }).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(train_proxies(&[], &cfg).unwrap_err(), FilterError::EmptyDataset);
    }
}
