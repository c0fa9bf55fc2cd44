//! Transformer encoder with a single-logit sigmoid classification head.
//!
//! Architecture (post-layer-norm, BERT lineage):
//!
//! ```text
//! E   = LayerNorm(token_embedding[ids] + position_embedding[0..L])
//! for each block:
//!     A   = MultiHeadAttention(E, key mask)          // PAD keys get zero weight
//!     E   = LayerNorm(E + Dropout(A Wo + bo))
//!     F   = GELU(E W1 + b1) W2 + b2
//!     E   = LayerNorm(E + Dropout(F))
//! h     = E[CLS]
//! logit = Dropout(h) . w + b
//! ```
//!
//! Dropout is the classic formulation: training multiplies by a
//! `Bernoulli(1 - p)` mask and leaves the scale alone, inference multiplies
//! the activation by `(1 - p)`. The head uses `dropout_p`; the two residual
//! branches inside every block use `hidden_dropout_p`.
//!
//! [`backward`] computes exact gradients for every parameter from a
//! [`ForwardCache`], reusing the sampled dropout masks.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::TokenBatch;
use crate::Scalar;

const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale forward cache: {0}")]
    StaleCache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Dropout rate on the `[CLS]` representation feeding the head.
    pub dropout_p: f64,
    /// Dropout rate on the attention and feed-forward residual branches.
    pub hidden_dropout_p: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8000,
            max_len: 128,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout_p: 0.3,
            hidden_dropout_p: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return bad("vocab_size, d_model, d_ff and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        for (name, p) in [("dropout_p", self.dropout_p), ("hidden_dropout_p", self.hidden_dropout_p)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "vocab_size = {}\nmax_len = {}\nn_layers = {}\nn_heads = {}\nd_model = {}\nd_ff = {}\ndropout_p = {:?}\nhidden_dropout_p = {:?}\nseed = {}\n",
            self.vocab_size,
            self.max_len,
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.dropout_p,
            self.hidden_dropout_p,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut fields: [Option<&str>; 9] = [None; 9];
        const KEYS: [&str; 9] = [
            "vocab_size",
            "max_len",
            "n_layers",
            "n_heads",
            "d_model",
            "d_ff",
            "dropout_p",
            "hidden_dropout_p",
            "seed",
        ];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("malformed header line {line:?}")))?;
            let idx = KEYS
                .iter()
                .position(|&key| key == k.trim())
                .ok_or_else(|| ModelError::InvalidConfig(format!("unknown header key {:?}", k.trim())))?;
            if fields[idx].replace(v.trim()).is_some() {
                return Err(ModelError::InvalidConfig(format!("duplicate header key {:?}", KEYS[idx])));
            }
        }
        let get = |i: usize| fields[i].ok_or_else(|| ModelError::InvalidConfig(format!("missing header key {:?}", KEYS[i])));
        let int = |i: usize| -> Result<usize, ModelError> {
            get(i)?
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("{} is not an integer", KEYS[i])))
        };
        let float = |i: usize| -> Result<f64, ModelError> {
            get(i)?
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("{} is not a number", KEYS[i])))
        };
        let cfg = ModelConfig {
            vocab_size: int(0)?,
            max_len: int(1)?,
            n_layers: int(2)?,
            n_heads: int(3)?,
            d_model: int(4)?,
            d_ff: int(5)?,
            dropout_p: float(6)?,
            hidden_dropout_p: float(7)?,
            seed: get(8)?
                .parse()
                .map_err(|_| ModelError::InvalidConfig("seed is not an integer".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names and shapes of every parameter tensor, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_len, d]),
            ("embeddings.norm.gamma".to_string(), vec![d]),
            ("embeddings.norm.beta".to_string(), vec![d]),
        ];
        for i in 0..self.n_layers {
            for (suffix, shape) in LayerParams::<f32>::layout(d, ff) {
                out.push((format!("layer.{i}.{suffix}"), shape));
            }
        }
        out.push(("head.weight".to_string(), vec![d]));
        out.push(("head.bias".to_string(), vec![1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query_w: Array2<T>,
    pub query_b: Array1<T>,
    pub key_w: Array2<T>,
    pub key_b: Array1<T>,
    pub value_w: Array2<T>,
    pub value_b: Array1<T>,
    pub output_w: Array2<T>,
    pub output_b: Array1<T>,
    pub attn_norm_gamma: Array1<T>,
    pub attn_norm_beta: Array1<T>,
    pub ffn_in_w: Array2<T>,
    pub ffn_in_b: Array1<T>,
    pub ffn_out_w: Array2<T>,
    pub ffn_out_b: Array1<T>,
    pub ffn_norm_gamma: Array1<T>,
    pub ffn_norm_beta: Array1<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn layout(d: usize, ff: usize) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("attention.query.weight", vec![d, d]),
            ("attention.query.bias", vec![d]),
            ("attention.key.weight", vec![d, d]),
            ("attention.key.bias", vec![d]),
            ("attention.value.weight", vec![d, d]),
            ("attention.value.bias", vec![d]),
            ("attention.output.weight", vec![d, d]),
            ("attention.output.bias", vec![d]),
            ("attention.norm.gamma", vec![d]),
            ("attention.norm.beta", vec![d]),
            ("ffn.input.weight", vec![d, ff]),
            ("ffn.input.bias", vec![ff]),
            ("ffn.output.weight", vec![ff, d]),
            ("ffn.output.bias", vec![d]),
            ("ffn.norm.gamma", vec![d]),
            ("ffn.norm.beta", vec![d]),
        ]
    }

    fn zeros(d: usize, ff: usize) -> Self {
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            query_w: m(d, d),
            query_b: v(d),
            key_w: m(d, d),
            key_b: v(d),
            value_w: m(d, d),
            value_b: v(d),
            output_w: m(d, d),
            output_b: v(d),
            attn_norm_gamma: v(d),
            attn_norm_beta: v(d),
            ffn_in_w: m(d, ff),
            ffn_in_b: v(ff),
            ffn_out_w: m(ff, d),
            ffn_out_b: v(d),
            ffn_norm_gamma: v(d),
            ffn_norm_beta: v(d),
        }
    }

    fn views(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![
            self.query_w.view().into_dyn(),
            self.query_b.view().into_dyn(),
            self.key_w.view().into_dyn(),
            self.key_b.view().into_dyn(),
            self.value_w.view().into_dyn(),
            self.value_b.view().into_dyn(),
            self.output_w.view().into_dyn(),
            self.output_b.view().into_dyn(),
            self.attn_norm_gamma.view().into_dyn(),
            self.attn_norm_beta.view().into_dyn(),
            self.ffn_in_w.view().into_dyn(),
            self.ffn_in_b.view().into_dyn(),
            self.ffn_out_w.view().into_dyn(),
            self.ffn_out_b.view().into_dyn(),
            self.ffn_norm_gamma.view().into_dyn(),
            self.ffn_norm_beta.view().into_dyn(),
        ]
    }

    fn views_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![
            self.query_w.view_mut().into_dyn(),
            self.query_b.view_mut().into_dyn(),
            self.key_w.view_mut().into_dyn(),
            self.key_b.view_mut().into_dyn(),
            self.value_w.view_mut().into_dyn(),
            self.value_b.view_mut().into_dyn(),
            self.output_w.view_mut().into_dyn(),
            self.output_b.view_mut().into_dyn(),
            self.attn_norm_gamma.view_mut().into_dyn(),
            self.attn_norm_beta.view_mut().into_dyn(),
            self.ffn_in_w.view_mut().into_dyn(),
            self.ffn_in_b.view_mut().into_dyn(),
            self.ffn_out_w.view_mut().into_dyn(),
            self.ffn_out_b.view_mut().into_dyn(),
            self.ffn_norm_gamma.view_mut().into_dyn(),
            self.ffn_norm_beta.view_mut().into_dyn(),
        ]
    }
}

/// Every trainable tensor of the encoder and head. Also used as the
/// gradient container, since gradients share names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: Array2<T>,
    pub position_embedding: Array2<T>,
    pub embed_norm_gamma: Array1<T>,
    pub embed_norm_beta: Array1<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: Array1<T>,
    pub head_b: Array1<T>,
}

/// Whether decoupled weight decay applies to the named parameter.
/// Biases and layer-norm scales/shifts are excluded.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero tensors shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_embedding: Array2::zeros((cfg.vocab_size, d)),
            position_embedding: Array2::zeros((cfg.max_len, d)),
            embed_norm_gamma: Array1::zeros(d),
            embed_norm_beta: Array1::zeros(d),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d, cfg.d_ff)).collect(),
            head_w: Array1::zeros(d),
            head_b: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Named views in canonical order (see [`ModelConfig::param_layout`]).
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), self.token_embedding.view().into_dyn()),
            ("embeddings.position".to_string(), self.position_embedding.view().into_dyn()),
            ("embeddings.norm.gamma".to_string(), self.embed_norm_gamma.view().into_dyn()),
            ("embeddings.norm.beta".to_string(), self.embed_norm_beta.view().into_dyn()),
        ];
        let (d, ff) = (self.head_w.len(), self.layers.first().map_or(0, |l| l.ffn_in_b.len()));
        let names = LayerParams::<T>::layout(d, ff);
        for (i, layer) in self.layers.iter().enumerate() {
            for ((suffix, _), view) in names.iter().zip(layer.views()) {
                out.push((format!("layer.{i}.{suffix}"), view));
            }
        }
        out.push(("head.weight".to_string(), self.head_w.view().into_dyn()));
        out.push(("head.bias".to_string(), self.head_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let (d, ff) = (self.head_w.len(), self.layers.first().map_or(0, |l| l.ffn_in_b.len()));
        let names = LayerParams::<T>::layout(d, ff);
        let mut out = vec![
            ("embeddings.token".to_string(), self.token_embedding.view_mut().into_dyn()),
            ("embeddings.position".to_string(), self.position_embedding.view_mut().into_dyn()),
            ("embeddings.norm.gamma".to_string(), self.embed_norm_gamma.view_mut().into_dyn()),
            ("embeddings.norm.beta".to_string(), self.embed_norm_beta.view_mut().into_dyn()),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for ((suffix, _), view) in names.iter().zip(layer.views_mut()) {
                out.push((format!("layer.{i}.{suffix}"), view));
            }
        }
        out.push(("head.weight".to_string(), self.head_w.view_mut().into_dyn()));
        out.push(("head.bias".to_string(), self.head_b.view_mut().into_dyn()));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn shapes_match(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Element-type conversion (e.g. `f32` checkpoint weights into an `f64` model).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::of(x.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|x| U::of(x.as_f64()));
        ModelParams {
            token_embedding: c2(&self.token_embedding),
            position_embedding: c2(&self.position_embedding),
            embed_norm_gamma: c1(&self.embed_norm_gamma),
            embed_norm_beta: c1(&self.embed_norm_beta),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    query_w: c2(&l.query_w),
                    query_b: c1(&l.query_b),
                    key_w: c2(&l.key_w),
                    key_b: c1(&l.key_b),
                    value_w: c2(&l.value_w),
                    value_b: c1(&l.value_b),
                    output_w: c2(&l.output_w),
                    output_b: c1(&l.output_b),
                    attn_norm_gamma: c1(&l.attn_norm_gamma),
                    attn_norm_beta: c1(&l.attn_norm_beta),
                    ffn_in_w: c2(&l.ffn_in_w),
                    ffn_in_b: c1(&l.ffn_in_b),
                    ffn_out_w: c2(&l.ffn_out_w),
                    ffn_out_b: c1(&l.ffn_out_b),
                    ffn_norm_gamma: c1(&l.ffn_norm_gamma),
                    ffn_norm_beta: c1(&l.ffn_norm_beta),
                })
                .collect(),
            head_w: c1(&self.head_w),
            head_b: c1(&self.head_b),
        }
    }

    fn check_config(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let layout = cfg.param_layout();
        let tensors = self.tensors();
        if layout.len() != tensors.len()
            || layout
                .iter()
                .zip(&tensors)
                .any(|((n, shape), (m, t))| n != m || shape.as_slice() != t.shape())
        {
            return Err(ModelError::ShapeMismatch("parameters do not match the model config".into()));
        }
        Ok(())
    }
}

/// Seeded initialization: weights from a normal with std 0.02 truncated at
/// two standard deviations, biases and layer-norm shifts zero, layer-norm
/// scales one.
pub fn init_params<T: Scalar>(cfg: &ModelConfig) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut params = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for (name, mut t) in params.tensors_mut() {
        if name.ends_with(".gamma") {
            t.fill(T::one());
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            t.fill(T::zero());
        } else {
            for x in t.iter_mut() {
                let v = loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                };
                *x = T::of(v);
            }
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention weights per (row, head), each `L x L`.
    probs: Vec<Array2<T>>,
    context: Array2<T>,
    attn_mask: Array2<T>,
    attn_norm: NormCache<T>,
    mid: Array2<T>,
    ffn_pre: Array2<T>,
    ffn_act: Array2<T>,
    ffn_mask: Array2<T>,
    ffn_norm: NormCache<T>,
}

/// Activations and dropout masks recorded by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch_size: usize,
    seq_len: usize,
    d_model: usize,
    ids: Vec<u32>,
    embed_norm: NormCache<T>,
    layers: Vec<LayerCache<T>>,
    /// `[CLS]` hidden state before head dropout, `batch x d_model`.
    pub cls: Array2<T>,
    /// Bernoulli keep mask applied to `cls`.
    pub head_mask: Array2<T>,
    /// Head input after dropout.
    pub head_input: Array2<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    /// The activation entering the head: `D * h` in train mode, `(1 - p) * h` in eval mode.
    pub head_input: Array2<T>,
    /// `[CLS]` hidden state before head dropout or scaling.
    pub cls: Array2<T>,
    pub cache: Option<ForwardCache<T>>,
}

enum Dropout<'a> {
    Train(&'a mut dyn rand::RngCore),
    Eval,
}

impl Dropout<'_> {
    /// Returns the output and, in train mode, the keep mask.
    fn apply<T: Scalar>(&mut self, x: Array2<T>, p: f64) -> (Array2<T>, Option<Array2<T>>) {
        match self {
            Dropout::Eval => {
                if p == 0.0 {
                    (x, None)
                } else {
                    let keep = T::of(1.0 - p);
                    (x.mapv(|v| v * keep), None)
                }
            }
            Dropout::Train(rng) => {
                let mask = if p == 0.0 {
                    Array2::ones(x.raw_dim())
                } else {
                    Array2::from_shape_simple_fn(x.raw_dim(), || {
                        if rng.random::<f64>() >= p {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                };
                (&x * &mask, Some(mask))
            }
        }
    }

    fn is_train(&self) -> bool {
        matches!(self, Dropout::Train(_))
    }
}

fn layer_norm<T: Scalar>(x: &Array2<T>, gamma: &Array1<T>, beta: &Array1<T>) -> (Array2<T>, NormCache<T>) {
    let n = T::of(x.ncols() as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b) / n;
        *s = T::one() / (var + eps).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * gamma + beta;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &NormCache<T>,
    gamma: &Array1<T>,
    dgamma: &mut Array1<T>,
    dbeta: &mut Array1<T>,
) -> Array2<T> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let n = T::of(dy.ncols() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xhat), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b) / n;
        Zip::from(&mut row).and(&xhat).for_each(|d, &xh| {
            *d = inv * (*d - mean_d - xh * mean_dx);
        });
    }
    dx
}

fn gelu_coeffs<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_coeffs::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_coeffs::<T>();
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn affine<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    x.dot(w) + b
}

fn check_batch<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, batch: &TokenBatch) -> Result<(), ModelError> {
    params.check_config(cfg)?;
    let cells = batch.batch_size * batch.seq_len;
    if batch.batch_size == 0 || batch.seq_len == 0 {
        return Err(ModelError::ShapeMismatch("empty batch".into()));
    }
    if batch.ids.len() != cells || batch.mask.len() != cells {
        return Err(ModelError::ShapeMismatch(format!(
            "ids/mask hold {}/{} cells, expected {cells}",
            batch.ids.len(),
            batch.mask.len()
        )));
    }
    if batch.seq_len > cfg.max_len {
        return Err(ModelError::ShapeMismatch(format!(
            "sequence length {} exceeds max_len {}",
            batch.seq_len, cfg.max_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::ShapeMismatch(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    for i in 0..batch.batch_size {
        if batch.mask_row(i).iter().all(|&m| m == 0) {
            return Err(ModelError::ShapeMismatch(format!("row {i} has no unmasked position")));
        }
    }
    Ok(())
}

fn run<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    mut dropout: Dropout<'_>,
) -> Result<ForwardOutput<T>, ModelError> {
    check_batch(params, cfg, batch)?;
    let (b, l, d) = (batch.batch_size, batch.seq_len, cfg.d_model);
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let record = dropout.is_train();

    let mut x = Array2::zeros((b * l, d));
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        let id = batch.ids[r] as usize;
        row.assign(&(&params.token_embedding.row(id) + &params.position_embedding.row(r % l)));
    }
    let (mut x, embed_norm) = layer_norm(&x, &params.embed_norm_gamma, &params.embed_norm_beta);

    let mut layer_caches = Vec::new();
    for layer in &params.layers {
        let q = affine(&x, &layer.query_w, &layer.query_b);
        let k = affine(&x, &layer.key_w, &layer.key_b);
        let v = affine(&x, &layer.value_w, &layer.value_b);
        let mut context = Array2::zeros((b * l, d));
        let mut probs = Vec::with_capacity(if record { b * heads } else { 0 });
        for row in 0..b {
            let keys = batch.mask_row(row);
            let rows = row * l..(row + 1) * l;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for mut prow in p.rows_mut() {
                    let mut max = T::neg_infinity();
                    for (j, &val) in prow.iter().enumerate() {
                        if keys[j] == 1 && val > max {
                            max = val;
                        }
                    }
                    let mut sum = T::zero();
                    for (j, val) in prow.iter_mut().enumerate() {
                        *val = if keys[j] == 1 { ((*val - max) * scale).exp() } else { T::zero() };
                        sum += *val;
                    }
                    prow.mapv_inplace(|e| e / sum);
                }
                context.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                if record {
                    probs.push(p);
                }
            }
        }
        let attn = affine(&context, &layer.output_w, &layer.output_b);
        let (attn, attn_mask) = dropout.apply(attn, cfg.hidden_dropout_p);
        let (mid, attn_norm) = layer_norm(&(&x + &attn), &layer.attn_norm_gamma, &layer.attn_norm_beta);
        let ffn_pre = affine(&mid, &layer.ffn_in_w, &layer.ffn_in_b);
        let ffn_act = ffn_pre.mapv(gelu);
        let ffn = affine(&ffn_act, &layer.ffn_out_w, &layer.ffn_out_b);
        let (ffn, ffn_mask) = dropout.apply(ffn, cfg.hidden_dropout_p);
        let (out, ffn_norm) = layer_norm(&(&mid + &ffn), &layer.ffn_norm_gamma, &layer.ffn_norm_beta);
        if record {
            layer_caches.push(LayerCache {
                input: x,
                q,
                k,
                v,
                probs,
                context,
                attn_mask: attn_mask.expect("train mode yields a mask"),
                attn_norm,
                mid,
                ffn_pre,
                ffn_act,
                ffn_mask: ffn_mask.expect("train mode yields a mask"),
                ffn_norm,
            });
        }
        x = out;
    }

    let cls = x.slice(s![..;l, ..]).to_owned();
    let (head_input, head_mask) = dropout.apply(cls.clone(), cfg.dropout_p);
    let bias = params.head_b[0];
    let logits: Vec<T> = head_input.dot(&params.head_w).iter().map(|&z| z + bias).collect();

    let cache = if record {
        Some(ForwardCache {
            batch_size: b,
            seq_len: l,
            d_model: d,
            ids: batch.ids.clone(),
            embed_norm,
            layers: layer_caches,
            cls: cls.clone(),
            head_mask: head_mask.expect("train mode yields a mask"),
            head_input: head_input.clone(),
        })
    } else {
        None
    };
    Ok(ForwardOutput {
        logits,
        head_input,
        cls,
        cache,
    })
}

/// Forward pass. Train mode samples dropout masks from `rng` and returns a
/// cache for [`backward`]; eval mode is deterministic and never touches `rng`.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    mode: Mode,
    rng: &mut dyn rand::RngCore,
) -> Result<ForwardOutput<T>, ModelError> {
    match mode {
        Mode::Train => run(params, cfg, batch, Dropout::Train(rng)),
        Mode::Eval => run(params, cfg, batch, Dropout::Eval),
    }
}

/// Eval-mode logits.
pub fn forward_eval<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, batch: &TokenBatch) -> Result<Vec<T>, ModelError> {
    run(params, cfg, batch, Dropout::Eval).map(|o| o.logits)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    let limit = T::of(LOGIT_CLAMP);
    let z = z.max(-limit).min(limit);
    T::one() / (T::one() + (-z).exp())
}

/// Eval-mode probabilities; a row is predicted positive iff its probability is at least 0.5.
pub fn classify<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, batch: &TokenBatch) -> Result<Vec<T>, ModelError> {
    Ok(forward_eval(params, cfg, batch)?.into_iter().map(sigmoid).collect())
}

/// Exact reverse-mode gradients of `sum_i dloss_dlogits[i] * logit_i`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    dloss_dlogits: &[T],
) -> Result<ModelParams<T>, ModelError> {
    params.check_config(cfg)?;
    if dloss_dlogits.len() != cache.batch_size {
        return Err(ModelError::StaleCache(format!(
            "{} logit gradients for a cached batch of {}",
            dloss_dlogits.len(),
            cache.batch_size
        )));
    }
    if cache.d_model != cfg.d_model || cache.layers.len() != cfg.n_layers {
        return Err(ModelError::StaleCache("cache was recorded for a different model shape".into()));
    }
    let (b, l, d) = (cache.batch_size, cache.seq_len, cfg.d_model);
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut grads = ModelParams::zeros(cfg);

    let dlogits = Array1::from_vec(dloss_dlogits.to_vec());
    grads.head_w = cache.head_input.t().dot(&dlogits);
    grads.head_b[0] = dlogits.sum();
    let dhead_in = dlogits.view().insert_axis(Axis(1)).dot(&params.head_w.view().insert_axis(Axis(0)));
    let dcls = &dhead_in * &cache.head_mask;

    let mut dx = Array2::zeros((b * l, d));
    for row in 0..b {
        dx.row_mut(row * l).assign(&dcls.row(row));
    }

    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        let dres2 = layer_norm_backward(&dx, &lc.ffn_norm, &layer.ffn_norm_gamma, &mut g.ffn_norm_gamma, &mut g.ffn_norm_beta);
        let dffn = &dres2 * &lc.ffn_mask;
        g.ffn_out_w = lc.ffn_act.t().dot(&dffn);
        g.ffn_out_b = dffn.sum_axis(Axis(0));
        let mut dpre = dffn.dot(&layer.ffn_out_w.t());
        Zip::from(&mut dpre).and(&lc.ffn_pre).for_each(|g, &x| *g *= gelu_grad(x));
        g.ffn_in_w = lc.mid.t().dot(&dpre);
        g.ffn_in_b = dpre.sum_axis(Axis(0));
        let dmid = dres2 + dpre.dot(&layer.ffn_in_w.t());

        let dres1 = layer_norm_backward(&dmid, &lc.attn_norm, &layer.attn_norm_gamma, &mut g.attn_norm_gamma, &mut g.attn_norm_beta);
        let dattn = &dres1 * &lc.attn_mask;
        g.output_w = lc.context.t().dot(&dattn);
        g.output_b = dattn.sum_axis(Axis(0));
        let dcontext = dattn.dot(&layer.output_w.t());

        let mut dq = Array2::zeros((b * l, d));
        let mut dk = Array2::zeros((b * l, d));
        let mut dv = Array2::zeros((b * l, d));
        for row in 0..b {
            let rows = row * l..(row + 1) * l;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &lc.probs[row * heads + h];
                let dctx = dcontext.slice(s![rows.clone(), cols.clone()]);
                let qh = lc.q.slice(s![rows.clone(), cols.clone()]);
                let kh = lc.k.slice(s![rows.clone(), cols.clone()]);
                let vh = lc.v.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dctx));
                let dp = dctx.dot(&vh.t());
                let mut ds = Array2::zeros(dp.raw_dim());
                softmax_backward_inplace(&mut ds, p, &dp);
                ds.mapv_inplace(|x| x * scale);
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        g.query_w = lc.input.t().dot(&dq);
        g.query_b = dq.sum_axis(Axis(0));
        g.key_w = lc.input.t().dot(&dk);
        g.key_b = dk.sum_axis(Axis(0));
        g.value_w = lc.input.t().dot(&dv);
        g.value_b = dv.sum_axis(Axis(0));
        dx = dres1 + dq.dot(&layer.query_w.t()) + dk.dot(&layer.key_w.t()) + dv.dot(&layer.value_w.t());
    }

    let dembed = layer_norm_backward(
        &dx,
        &cache.embed_norm,
        &params.embed_norm_gamma,
        &mut grads.embed_norm_gamma,
        &mut grads.embed_norm_beta,
    );
    for (r, drow) in dembed.rows().into_iter().enumerate() {
        let id = cache.ids[r] as usize;
        let mut tok = grads.token_embedding.row_mut(id);
        tok += &drow;
        let mut pos = grads.position_embedding.row_mut(r % l);
        pos += &drow;
    }
    Ok(grads)
}

/// `ds = p * (dp - rowsum(dp * p))`, written into `ds`.
fn softmax_backward_inplace<T: Scalar>(ds: &mut Array2<T>, p: &Array2<T>, dp: &Array2<T>) {
    for ((mut out, prow), dprow) in ds.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b);
        Zip::from(&mut out).and(&prow).and(&dprow).for_each(|o, &pv, &dv| *o = pv * (dv - dot));
    }
}

/// Deterministic `[CLS]` hidden state (eval-mode blocks, no head scaling).
pub fn cls_features<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, batch: &TokenBatch) -> Result<Array2<T>, ModelError> {
    run(params, cfg, batch, Dropout::Eval).map(|o| o.cls)
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} layers, {} heads, d_model {}, d_ff {}, vocab {}, max_len {}, dropout {}/{}",
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.max_len,
            self.dropout_p,
            self.hidden_dropout_p
        )
    }
}
