//! File-level runs: training, evaluation and hard-split filtering with a JSON
//! manifest that records every resolved setting and input hash.
//!
//! A run's outputs depend only on its spec and input bytes. The manifest never
//! records the output directory, so two runs of the same spec produce the same
//! manifest apart from the optional timestamps.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::batching::{encode_examples, Domain, EncodedExample, Example};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::dataset::{load_split, DatasetError, DomainSpec, LoadedSplit, Split};
use crate::hard_filter::{filter_hard, score_examples, score_manifest_csv, train_proxies, DifficultyScore, FilterConfig, FilterError};
use crate::metrics::{report_csv, EvalReport};
use crate::model::ModelConfig;
use crate::text_normalize::{normalize, NormConfig, NormConfigError};
use crate::tokenizer::{save_vocab, train_vocab, load_vocab, TokenizerConfig, TokenizerError, Vocab};
use crate::trainer::{epoch_log_csv, evaluate, split_train_val, train, EvalOutput, TrainConfig, TrainError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the directory under which runs are written by default.
pub const RUN_ROOT_ENV: &str = "ETHICS_RUN_ROOT";

#[derive(Debug, Error)]
pub enum RunError {
    /// Rejected settings; nothing was computed.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Filter(FilterError),
    #[error("{0}")]
    Manifest(String),
}

impl RunError {
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => RunError::Config(m),
            TrainError::Optim(crate::optimizer::OptimError::InvalidConfig(m)) => RunError::Config(m),
            TrainError::Model(crate::model::ModelError::InvalidConfig(m)) => RunError::Config(m),
            other => RunError::Train(other),
        }
    }
}

impl From<FilterError> for RunError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::QuantileOutOfRange(_) | FilterError::NoProxies => RunError::Config(e.to_string()),
            FilterError::Train(t) => t.into(),
            other => RunError::Filter(other),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, RunError> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), RunError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, RunError> {
    Ok(sha256_hex(&read(path)?))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Text preparation shared by every run kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSettings {
    /// Normalization config; the bundled default when absent.
    pub norm_config: Option<PathBuf>,
    /// Column mapping override; the bundled spec for the domain when absent.
    pub domain_spec: Option<PathBuf>,
    /// Existing vocabulary; otherwise one is trained on the training texts.
    pub vocab: Option<PathBuf>,
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TextSettings {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        Self {
            norm_config: None,
            domain_spec: None,
            vocab: None,
            vocab_size: t.vocab_size,
            min_frequency: t.min_frequency,
        }
    }
}

impl TextSettings {
    fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            vocab_size: self.vocab_size,
            min_frequency: self.min_frequency,
            ..TokenizerConfig::default()
        }
    }

    fn validate(&self) -> Result<(), RunError> {
        self.tokenizer_config().validate().map_err(|e| RunError::Config(e.to_string()))
    }

    fn norm(&self, inputs: &mut Vec<FileHash>) -> Result<NormConfig, RunError> {
        match &self.norm_config {
            None => Ok(NormConfig::default()),
            Some(p) => {
                inputs.push(hash_entry(p)?);
                NormConfig::load(p).map_err(|e| match e {
                    NormConfigError::Io { .. } => io_err(p, e),
                    other => RunError::Config(format!("{}: {other}", p.display())),
                })
            }
        }
    }

    fn spec(&self, domain: Domain, inputs: &mut Vec<FileHash>) -> Result<DomainSpec, RunError> {
        match &self.domain_spec {
            None => Ok(DomainSpec::default_for(domain)),
            Some(p) => {
                let bytes = read(p)?;
                inputs.push(FileHash {
                    path: p.display().to_string(),
                    sha256: sha256_hex(&bytes),
                });
                let text = String::from_utf8(bytes).map_err(|_| RunError::Config(format!("{} is not UTF-8", p.display())))?;
                let spec = DomainSpec::parse(&text).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
                if spec.domain != domain {
                    return Err(RunError::Config(format!("{} describes {}, not {domain}", p.display(), spec.domain)));
                }
                Ok(spec)
            }
        }
    }

    /// Loads the configured vocabulary or trains one on `texts`.
    fn vocab(&self, texts: &[&str], inputs: &mut Vec<FileHash>) -> Result<Vocab, RunError> {
        match &self.vocab {
            Some(p) => {
                inputs.push(hash_entry(p)?);
                Ok(load_vocab(p)?)
            }
            None => Ok(train_vocab(texts, &self.tokenizer_config())?),
        }
    }
}

fn hash_entry(path: &Path) -> Result<FileHash, RunError> {
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: file_sha256(path)?,
    })
}

fn normalized(examples: &[Example], norm: &NormConfig) -> Vec<Example> {
    examples
        .iter()
        .map(|ex| Example {
            text_a: normalize(&ex.text_a, norm),
            text_b: ex.text_b.as_deref().map(|b| normalize(b, norm)),
            ..ex.clone()
        })
        .collect()
}

fn corpus(examples: &[Example]) -> Vec<&str> {
    examples
        .iter()
        .flat_map(|e| std::iter::once(e.text_a.as_str()).chain(e.text_b.as_deref()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunSpec {
    pub domain: Domain,
    pub data_dir: PathBuf,
    pub text: TextSettings,
    /// Fraction of the training file used for training; the rest validates.
    pub train_ratio: f64,
    /// Use only the first `limit` rows of the training file.
    pub limit: Option<usize>,
    pub train: TrainConfig,
}

impl TrainRunSpec {
    pub fn new(domain: Domain, data_dir: PathBuf) -> Self {
        Self {
            domain,
            data_dir,
            text: TextSettings::default(),
            train_ratio: 0.8,
            limit: None,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(RunError::Config(format!("train ratio {} must lie in (0, 1)", self.train_ratio)));
        }
        if self.limit == Some(0) {
            return Err(RunError::Config("limit must be at least 1".into()));
        }
        self.text.validate()?;
        // vocab_size is resolved later; everything else must already hold
        let mut probe = self.train.clone();
        probe.model.vocab_size = probe.model.vocab_size.max(1);
        probe.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub spec: serde_json::Value,
    pub resolved_model: Option<ModelConfig>,
    pub inputs: Vec<FileHash>,
    /// Output file names relative to the run directory, with hashes.
    pub outputs: Vec<FileHash>,
    pub started_unix: Option<u64>,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<RunManifest, RunError> {
        let bytes = read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| RunError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn train_spec(&self) -> Result<TrainRunSpec, RunError> {
        if self.command != "train" {
            return Err(RunError::Manifest(format!("manifest records a {:?} run, not train", self.command)));
        }
        serde_json::from_value(self.spec.clone()).map_err(|e| RunError::Manifest(e.to_string()))
    }

    /// Fails when an input file changed since the manifest was written.
    pub fn check_inputs(&self) -> Result<(), RunError> {
        for input in &self.inputs {
            let now = file_sha256(Path::new(&input.path))?;
            if now != input.sha256 {
                return Err(RunError::Manifest(format!("{} changed since the recorded run", input.path)));
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LAST_CHECKPOINT_FILE: &str = "last.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const VAL_REPORT_FILE: &str = "val_report.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct TrainRunSummary {
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub val_report: Option<EvalReport>,
    pub manifest: RunManifest,
}

/// Trains on the domain's training file and writes the run directory.
pub fn train_run(spec: &TrainRunSpec, out_dir: &Path) -> Result<TrainRunSummary, RunError> {
    spec.validate()?;
    let started = spec.train.record_wall_clock.then(unix_now);
    let mut inputs = Vec::new();
    let dspec = spec.text.spec(spec.domain, &mut inputs)?;
    let norm = spec.text.norm(&mut inputs)?;
    let train_path = dspec.split_path(&spec.data_dir, Split::Train);
    inputs.push(hash_entry(&train_path)?);
    let mut rows = load_split(&train_path, &dspec)?.examples;
    if let Some(limit) = spec.limit {
        rows.truncate(limit);
    }
    let (train_rows, val_rows) = split_train_val(&rows, spec.train_ratio, spec.train.seed)?;
    let train_rows = normalized(&train_rows, &norm);
    let val_rows = normalized(&val_rows, &norm);
    let vocab = spec.text.vocab(&corpus(&train_rows), &mut inputs)?;

    let mut cfg = spec.train.clone();
    cfg.model.vocab_size = vocab.len();
    cfg.validate()?;
    let train_set = encode_examples(&train_rows, &vocab, cfg.max_len).map_err(TrainError::from)?;
    let val_set = encode_examples(&val_rows, &vocab, cfg.max_len).map_err(TrainError::from)?;
    log::info!(
        "{}: {} training and {} validation rows, vocabulary of {}",
        spec.domain,
        train_set.len(),
        val_set.len(),
        vocab.len()
    );
    let outcome = train::<f32>(&train_set, &val_set, &cfg)?;

    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let val_eval = if val_set.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.best_params, &cfg.model, &val_set, cfg.batch_size, cfg.max_len)?)
    };
    let mut outputs = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<(), RunError> {
        write(&out_dir.join(name), &bytes)?;
        outputs.push(FileHash {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    };
    emit(VOCAB_FILE, vocab.to_text().into_bytes())?;
    emit(CHECKPOINT_FILE, crate::checkpoint::encode_checkpoint(&outcome.best_params, &cfg.model))?;
    emit(LAST_CHECKPOINT_FILE, crate::checkpoint::encode_checkpoint(&outcome.params, &cfg.model))?;
    emit(EPOCHS_FILE, epoch_log_csv(&outcome.logs).into_bytes())?;
    if let Some(v) = &val_eval {
        emit(VAL_REPORT_FILE, report_csv(&[(spec.domain.to_string(), v.report.clone())]).into_bytes())?;
    }
    let manifest = RunManifest {
        tool: "ethics".into(),
        version: TOOL_VERSION.into(),
        command: "train".into(),
        spec: serde_json::to_value(spec).expect("spec serializes"),
        resolved_model: Some(cfg.model.clone()),
        inputs,
        outputs,
        started_unix: started,
        finished_unix: spec.train.record_wall_clock.then(unix_now),
    };
    write(&out_dir.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(TrainRunSummary {
        out_dir: out_dir.to_path_buf(),
        best_epoch: outcome.best_epoch,
        val_report: val_eval.map(|v| v.report),
        manifest,
    })
}

/// Re-runs the training recorded in a manifest into `out_dir`.
pub fn replay_train(manifest_path: &Path, out_dir: &Path) -> Result<TrainRunSummary, RunError> {
    let manifest = RunManifest::load(manifest_path)?;
    manifest.check_inputs()?;
    train_run(&manifest.train_spec()?, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunSpec {
    pub domain: Domain,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    /// Explicit split file; otherwise `split` is looked up under `data_dir`.
    pub input: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub split: Split,
    pub norm_config: Option<PathBuf>,
    pub domain_spec: Option<PathBuf>,
    pub batch_size: usize,
    pub max_len: usize,
    pub limit: Option<usize>,
}

impl EvalRunSpec {
    pub fn new(domain: Domain, checkpoint: PathBuf, vocab: PathBuf) -> Self {
        Self {
            domain,
            checkpoint,
            vocab,
            input: None,
            data_dir: None,
            split: Split::Test,
            norm_config: None,
            domain_spec: None,
            batch_size: crate::batching::DEFAULT_BATCH_SIZE,
            max_len: crate::batching::MAX_SEQUENCE_LENGTH,
            limit: None,
        }
    }

    fn input_path(&self, dspec: &DomainSpec) -> Result<PathBuf, RunError> {
        match (&self.input, &self.data_dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dspec.split_path(dir, self.split)),
            (None, None) => Err(RunError::Config("either an input file or a data directory is required".into())),
        }
    }
}

/// Scores a split with a saved checkpoint.
pub fn evaluate_run(spec: &EvalRunSpec) -> Result<EvalOutput, RunError> {
    if spec.batch_size == 0 || spec.max_len < 2 {
        return Err(RunError::Config("batch size must be positive and max length at least 2".into()));
    }
    let text = TextSettings {
        norm_config: spec.norm_config.clone(),
        domain_spec: spec.domain_spec.clone(),
        ..TextSettings::default()
    };
    let mut inputs = Vec::new();
    let dspec = text.spec(spec.domain, &mut inputs)?;
    let norm = text.norm(&mut inputs)?;
    let (params, cfg) = load_checkpoint(&spec.checkpoint)?;
    let vocab = load_vocab(&spec.vocab)?;
    if vocab.len() != cfg.vocab_size {
        return Err(RunError::Checkpoint(CheckpointError::ShapeMismatch(format!(
            "vocabulary has {} entries, checkpoint expects {}",
            vocab.len(),
            cfg.vocab_size
        ))));
    }
    let max_len = spec.max_len.min(cfg.max_len);
    let path = spec.input_path(&dspec)?;
    let mut rows = load_split(&path, &dspec)?.examples;
    if let Some(limit) = spec.limit {
        rows.truncate(limit);
    }
    let encoded = encode_examples(&normalized(&rows, &norm), &vocab, max_len).map_err(TrainError::from)?;
    Ok(evaluate(&params, &cfg, &encoded, spec.batch_size, max_len)?)
}

/// `example_id,probability,label` lines.
pub fn scores_csv(out: &EvalOutput) -> String {
    let mut s = String::from("example_id,probability,label\n");
    for (id, p, y) in &out.scores {
        s.push_str(&format!("{id},{p:.9},{y}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRunSpec {
    pub domain: Domain,
    pub dev: PathBuf,
    pub pool: PathBuf,
    pub text: TextSettings,
    pub n_proxies: usize,
    pub keep_quantile: f64,
    pub seed: u64,
    pub proxy: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct FilterRunSummary {
    pub pool_size: usize,
    pub hard: Vec<usize>,
    pub scores: Vec<DifficultyScore>,
    pub hard_csv: String,
    pub scores_csv: String,
}

/// Trains proxies on `dev`, scores `pool` and returns the hard subset as CSV
/// in the pool's own format plus the `example_id,score` manifest.
pub fn filter_run(spec: &FilterRunSpec) -> Result<FilterRunSummary, RunError> {
    spec.text.validate()?;
    let mut inputs = Vec::new();
    let dspec = spec.text.spec(spec.domain, &mut inputs)?;
    let norm = spec.text.norm(&mut inputs)?;
    let dev = load_split(&spec.dev, &dspec)?;
    let pool: LoadedSplit = load_split(&spec.pool, &dspec)?;
    if dev.examples.is_empty() || pool.examples.is_empty() {
        return Err(RunError::Filter(FilterError::EmptyDataset));
    }
    let dev_rows = normalized(&dev.examples, &norm);
    let vocab = spec.text.vocab(&corpus(&dev_rows), &mut inputs)?;
    let mut proxy = spec.proxy.clone();
    proxy.model.vocab_size = vocab.len();
    let cfg = FilterConfig {
        n_proxies: spec.n_proxies,
        proxy,
        keep_quantile: spec.keep_quantile,
        seed: spec.seed,
    };
    cfg.validate()?;
    let encode = |rows: &[Example]| -> Result<Vec<EncodedExample>, RunError> {
        Ok(encode_examples(rows, &vocab, cfg.proxy.max_len).map_err(TrainError::from)?)
    };
    let dev_set = encode(&dev_rows)?;
    let pool_set = encode(&normalized(&pool.examples, &norm))?;
    let proxies = train_proxies(&dev_set, &cfg)?;
    let scores = score_examples(&proxies, &cfg.proxy, &pool_set)?;
    let (hard, _) = filter_hard(&scores, cfg.keep_quantile)?;
    let ids: Vec<usize> = hard.iter().map(|&i| pool.examples[i].id).collect();
    Ok(FilterRunSummary {
        pool_size: pool.examples.len(),
        hard_csv: pool.subset_csv(&ids)?,
        scores_csv: score_manifest_csv(&scores),
        hard,
        scores,
    })
}

/// Writes every `(file name, contents)` pair under `dir`.
pub fn write_outputs(dir: &Path, files: &[(&str, &[u8])]) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, bytes) in files {
        write(&dir.join(name), bytes)?;
    }
    Ok(())
}

/// `$ETHICS_RUN_ROOT/<name>`, or `runs/<name>` when the variable is unset.
pub fn default_run_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

/// Reads a whole vocabulary-training corpus: CSV split files contribute their
/// text fields, other files one line per text.
pub fn corpus_from_files(paths: &[PathBuf], domain: Option<Domain>, norm: &NormConfig) -> Result<Vec<String>, RunError> {
    let mut texts = Vec::new();
    for p in paths {
        match domain {
            Some(d) => {
                let rows = load_split(p, &DomainSpec::default_for(d))?.examples;
                texts.extend(corpus(&normalized(&rows, norm)).into_iter().map(str::to_string));
            }
            None => {
                let text = String::from_utf8(read(p)?).map_err(|_| io_err(p, "not UTF-8"))?;
                texts.extend(text.lines().map(|l| normalize(l, norm)));
            }
        }
    }
    Ok(texts)
}

/// Trains a vocabulary and writes it to `out`.
pub fn build_vocab_run(texts: &[String], cfg: &TokenizerConfig, out: &Path) -> Result<Vocab, RunError> {
    cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let vocab = train_vocab(texts, cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_vocab(&vocab, out)?;
    Ok(vocab)
}

/// Saves a checkpoint file next to other outputs.
pub fn save_params_f32(params: &crate::model::ModelParams<f32>, cfg: &ModelConfig, path: &Path) -> Result<(), RunError> {
    Ok(save_checkpoint(params, cfg, path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ethics")
    }

    fn tiny_spec() -> TrainRunSpec {
        let mut spec = TrainRunSpec::new(Domain::Justice, fixture_dir());
        spec.limit = Some(30);
        spec.text.vocab_size = 120;
        spec.train.epochs = 1;
        spec.train.batch_size = 8;
        spec.train.max_len = 24;
        spec.train.record_wall_clock = false;
        spec.train.model = ModelConfig {
            max_len: 24,
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            ..ModelConfig::default()
        };
        spec
    }

    #[test]
    fn config_errors_are_classified() {
        let mut spec = tiny_spec();
        spec.train.optim.eta0 = 0.0;
        assert!(spec.validate().unwrap_err().is_config());
        let mut spec = tiny_spec();
        spec.train_ratio = 1.0;
        assert!(spec.validate().unwrap_err().is_config());
        let mut spec = tiny_spec();
        spec.text.vocab_size = 2;
        assert!(spec.validate().unwrap_err().is_config());
        let missing = TrainRunSpec::new(Domain::Justice, PathBuf::from("/nonexistent"));
        let err = train_run(&missing, Path::new("/nonexistent/out")).unwrap_err();
        assert!(!err.is_config());
        assert!(err.to_string().contains("/nonexistent"));
    }

    #[test]
    fn manifest_round_trip_and_input_check() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        std::fs::create_dir_all(data.join("justice")).unwrap();
        let src = fixture_dir().join("justice/justice_train.csv");
        let copy = data.join("justice/justice_train.csv");
        std::fs::copy(&src, &copy).unwrap();
        let spec = TrainRunSpec {
            data_dir: data.clone(),
            ..tiny_spec()
        };
        let summary = train_run(&spec, &tmp.path().join("run")).unwrap();
        assert_eq!(summary.manifest.started_unix, None);
        let loaded = RunManifest::load(&tmp.path().join("run").join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, summary.manifest);
        assert_eq!(loaded.train_spec().unwrap(), spec);
        assert!(loaded.check_inputs().is_ok());
        assert_eq!(loaded.inputs.len(), 1);
        std::fs::write(&copy, "label,scenario\n1,changed\n").unwrap();
        assert!(matches!(loaded.check_inputs(), Err(RunError::Manifest(_))));
        let other = RunManifest {
            command: "evaluate".into(),
            ..loaded
        };
        assert!(other.train_spec().is_err());
    }

    #[test]
    fn evaluate_reads_back_a_run() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        train_run(&tiny_spec(), &out).unwrap();
        let mut spec = EvalRunSpec::new(Domain::Justice, out.join(CHECKPOINT_FILE), out.join(VOCAB_FILE));
        spec.data_dir = Some(fixture_dir());
        spec.split = Split::TestHard;
        let eval = evaluate_run(&spec).unwrap();
        assert_eq!(eval.report.n, 20);
        assert_eq!(scores_csv(&eval).lines().count(), 21);
        spec.data_dir = None;
        assert!(evaluate_run(&spec).unwrap_err().is_config());
    }

    #[test]
    fn default_run_dir_is_relative_without_root() {
        let dir = default_run_dir("x");
        assert!(dir.ends_with("x"));
    }
}
