//! Fine-tuning loop: stratified train/validation split, shuffled micro-batches,
//! gradient accumulation, per-epoch evaluation and best-model selection.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{batches_in_order, shuffled_order, BatchError, EncodedExample, Example, DEFAULT_BATCH_SIZE, MAX_SEQUENCE_LENGTH};
use crate::loss::{bce_from_logits, bce_grad_logits, LossError};
use crate::metrics::{evaluate_scores, EvalReport, MetricsError};
use crate::model::{backward, forward, forward_eval, init_params, sigmoid, Mode, ModelConfig, ModelError, ModelParams};
use crate::optimizer::{OptimConfig, OptimError, OptimState};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 examples to split, got {0}")]
    TooFewExamples(usize),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    /// Stop after this many epochs without a better validation accuracy.
    pub early_stop_patience: Option<usize>,
    /// When false, every timing field is written as zero so logs are reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: DEFAULT_BATCH_SIZE,
            max_len: MAX_SEQUENCE_LENGTH,
            seed: 0,
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            early_stop_patience: None,
            record_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn n_acc(&self) -> usize {
        self.optim.n_acc
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if self.max_len < 2 || self.max_len > self.model.max_len {
            return bad(format!(
                "max_len {} must lie in [2, model max_len {}]",
                self.max_len, self.model.max_len
            ));
        }
        if self.early_stop_patience == Some(0) {
            return bad("early-stop patience must be at least 1".into());
        }
        self.optim.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
    pub flushes: usize,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{:.3}\n",
            l.epoch,
            l.train_loss,
            l.train_accuracy,
            opt(l.val_loss),
            opt(l.val_accuracy),
            l.seconds
        ));
    }
    out
}

/// A one-line text sparkline of a series, scaled to its own range.
pub fn sparkline(values: &[f64]) -> String {
    const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                BARS[(((v - lo) / (hi - lo)) * 7.0).round() as usize]
            } else {
                BARS[3]
            }
        })
        .collect()
}

/// Seeded, label-stratified split. The first part gets `floor(n * ratio)` examples.
///
/// The validation share of each class is its proportional quota, with the
/// leftover slots going to the largest fractional remainders. Both parts keep
/// the input order.
pub fn split_train_val(examples: &[Example], ratio: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>), TrainError> {
    let n = examples.len();
    if n < 2 {
        return Err(TrainError::TooFewExamples(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TrainError::InvalidConfig(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    // the epsilon keeps exact products such as 13910 * 0.8 from flooring one short
    let n_train = ((n as f64 * ratio) + 1e-9).floor() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let n_val = n - n_train;

    let classes: [Vec<usize>; 2] = [0u8, 1].map(|c| (0..n).filter(|&i| examples[i].label == c).collect());
    let quotas: Vec<(usize, usize)> = classes
        .iter()
        .map(|members| {
            let exact = members.len() * n_val;
            (exact / n, exact % n)
        })
        .collect();
    let mut val_counts: Vec<usize> = quotas.iter().map(|q| q.0).collect();
    let mut leftover = n_val - val_counts.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..2).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].1.cmp(&quotas[a].1).then(a.cmp(&b)));
    for &c in by_remainder.iter().cycle().take(4) {
        if leftover == 0 {
            break;
        }
        if val_counts[c] < classes[c].len() {
            val_counts[c] += 1;
            leftover -= 1;
        }
    }

    let mut in_val = vec![false; n];
    for (c, members) in classes.iter().enumerate() {
        let order = shuffled_order(members.len(), seed.wrapping_add(c as u64));
        for &k in order.iter().take(val_counts[c]) {
            in_val[members[k]] = true;
        }
    }
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(n_val));
    for (ex, &v) in examples.iter().zip(&in_val) {
        if v {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((train, val))
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub mean_loss: f64,
    /// `(example id, probability, label)` in input order.
    pub scores: Vec<(usize, f64, u8)>,
}

/// Eval-mode scoring of `data` in fixed-order batches of `batch_size`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    data: &[EncodedExample],
    batch_size: usize,
    max_len: usize,
) -> Result<EvalOutput, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut logits = Vec::with_capacity(data.len());
    for batch in batches_in_order(data, &order, batch_size, max_len)? {
        logits.extend(forward_eval(params, cfg, &batch)?.into_iter().map(|z| z.as_f64()));
    }
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mean_loss = bce_from_logits(&logits, &labels)?.mean_loss;
    let report = evaluate_scores(&probs, &labels)?;
    let scores = data.iter().zip(&probs).map(|(e, &p)| (e.id, p, e.label)).collect();
    Ok(EvalOutput { report, mean_loss, scores })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    /// Parameters after the epoch with the best validation accuracy
    /// (training accuracy when there is no validation set).
    pub best_params: ModelParams<T>,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
    pub total_flushes: u64,
}

const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Trains from the seeded initialization of `cfg.model`.
pub fn train<T: Scalar>(train_set: &[EncodedExample], val_set: &[EncodedExample], cfg: &TrainConfig) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let params = init_params(&cfg.model)?;
    train_from(params, train_set, val_set, cfg)
}

/// Trains starting from `params`.
pub fn train_from<T: Scalar>(
    mut params: ModelParams<T>,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut state = OptimState::new(&params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, ModelParams<T>)> = None;
    let mut since_improvement = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = shuffled_order(train_set.len(), shuffle_rng.next_u64());
        let batches = batches_in_order(train_set, &order, cfg.batch_size, cfg.max_len)?;
        let mut flushes = 0;
        for batch in &batches {
            let out = forward(&params, &cfg.model, batch, Mode::Train, &mut dropout_rng)?;
            let upstream = bce_grad_logits(&out.logits, &batch.labels)?;
            let cache = out.cache.expect("train mode records a cache");
            let grads = backward(&params, &cfg.model, &cache, &upstream)?;
            state.accumulate(&grads, &cfg.optim)?;
            if state.accumulated == cfg.optim.n_acc {
                state.flush(&mut params, &cfg.optim)?;
                flushes += 1;
            }
        }
        if state.accumulated > 0 {
            state.flush_partial(&mut params, &cfg.optim)?;
            flushes += 1;
        }
        if !params.all_finite() {
            return Err(TrainError::Model(ModelError::InvalidConfig(format!(
                "parameters became non-finite in epoch {epoch}"
            ))));
        }

        let train_eval = evaluate(&params, &cfg.model, train_set, cfg.batch_size, cfg.max_len)?;
        let val_eval = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&params, &cfg.model, val_set, cfg.batch_size, cfg.max_len)?)
        };
        let log = EpochLog {
            epoch,
            train_loss: train_eval.mean_loss,
            train_accuracy: train_eval.report.accuracy,
            val_loss: val_eval.as_ref().map(|v| v.mean_loss),
            val_accuracy: val_eval.as_ref().map(|v| v.report.accuracy),
            seconds: if cfg.record_wall_clock { started.elapsed().as_secs_f64() } else { 0.0 },
            flushes,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {} acc {}",
            log.train_loss,
            log.train_accuracy,
            log.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            log.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );

        let (acc, loss) = match &val_eval {
            Some(v) => (v.report.accuracy, v.mean_loss),
            None => (train_eval.report.accuracy, train_eval.mean_loss),
        };
        let improved = match &best {
            None => true,
            Some((best_acc, best_loss, _, _)) => acc > *best_acc || (acc == *best_acc && loss < *best_loss),
        };
        if improved {
            best = Some((acc, loss, epoch, params.clone()));
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        logs.push(log);
        if cfg.early_stop_patience.is_some_and(|p| since_improvement >= p) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (_, _, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        best_params,
        best_epoch,
        logs,
        total_flushes: state.step,
    })
}
