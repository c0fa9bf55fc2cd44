use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ethics_core::batching::{Domain, DEFAULT_BATCH_SIZE, MAX_SEQUENCE_LENGTH};
use ethics_core::dataset::Split;
use ethics_core::metrics::{parse_report_csv, percent, render_confusion, report_csv};
use ethics_core::model::ModelConfig;
use ethics_core::optimizer::OptimConfig;
use ethics_core::report::{bundled_baselines, render_comparison, row_from_report, Table};
use ethics_core::run::{
    build_vocab_run, corpus_from_files, default_run_dir, evaluate_run, filter_run, replay_train, scores_csv, train_run,
    EvalRunSpec, FilterRunSpec, RunError, TextSettings, TrainRunSpec,
};
use ethics_core::text_normalize::{normalize, NormConfig};
use ethics_core::tokenizer::TokenizerConfig;
use ethics_core::trainer::{sparkline, TrainConfig};

#[derive(Parser)]
#[command(name = "ethics", version, about = "Text normalization, training and evaluation for moral-judgement classifiers")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize lines from stdin to stdout.
    Normalize {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a subword vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Fine-tune a classifier on one domain.
    Train(TrainArgs),
    /// Score a split with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Keep the examples a proxy ensemble finds hardest.
    FilterHard(FilterArgs),
    /// Render a comparison table from report CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long, default_value_t = TokenizerConfig::default().vocab_size)]
    size: usize,
    #[arg(long, default_value_t = TokenizerConfig::default().min_frequency)]
    min_freq: u64,
    #[arg(long)]
    out: PathBuf,
    /// Read inputs as split CSVs of this domain instead of plain lines.
    #[arg(long)]
    domain: Option<Domain>,
    #[arg(long)]
    norm_config: Option<PathBuf>,
    /// Corpus files; stdin when none are given.
    inputs: Vec<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = ModelConfig::default().n_layers)]
    layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().n_heads)]
    heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_model)]
    d_model: usize,
    #[arg(long, default_value_t = ModelConfig::default().d_ff)]
    d_ff: usize,
    /// Dropout before the classification head.
    #[arg(long, default_value_t = ModelConfig::default().dropout_p)]
    dropout: f64,
    /// Dropout on every residual branch; defaults to --dropout.
    #[arg(long)]
    hidden_dropout: Option<f64>,
}

#[derive(Args, Clone)]
struct TrainingArgs {
    #[arg(long, default_value_t = OptimConfig::default().eta0)]
    lr: f64,
    #[arg(long, default_value_t = OptimConfig::default().weight_decay)]
    wd: f64,
    #[arg(long, default_value_t = OptimConfig::default().beta1)]
    beta1: f64,
    #[arg(long, default_value_t = OptimConfig::default().beta2)]
    beta2: f64,
    #[arg(long, default_value_t = OptimConfig::default().epsilon)]
    eps: f64,
    #[arg(long, default_value_t = OptimConfig::default().n_acc)]
    grad_accum: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = MAX_SEQUENCE_LENGTH)]
    max_len: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

impl TrainingArgs {
    fn config(&self, record_wall_clock: bool, patience: Option<usize>) -> TrainConfig {
        let m = &self.model;
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_len: self.max_len,
            seed: self.seed,
            optim: OptimConfig {
                eta0: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.eps,
                weight_decay: self.wd,
                n_acc: self.grad_accum,
            },
            model: ModelConfig {
                // resolved from the vocabulary at run time
                vocab_size: 0,
                max_len: self.max_len,
                n_layers: m.layers,
                n_heads: m.heads,
                d_model: m.d_model,
                d_ff: m.d_ff,
                dropout_p: m.dropout,
                hidden_dropout_p: m.hidden_dropout.unwrap_or(m.dropout),
                seed: self.seed,
            },
            early_stop_patience: patience,
            record_wall_clock,
        }
    }
}

#[derive(Args)]
struct TextArgs {
    #[arg(long)]
    norm_config: Option<PathBuf>,
    /// Column mapping file overriding the bundled one.
    #[arg(long)]
    domain_spec: Option<PathBuf>,
    /// Existing vocabulary; one is trained on the training texts otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = TokenizerConfig::default().vocab_size)]
    vocab_size: usize,
    #[arg(long, default_value_t = TokenizerConfig::default().min_frequency)]
    min_freq: u64,
}

impl TextArgs {
    fn settings(&self) -> TextSettings {
        TextSettings {
            norm_config: self.norm_config.clone(),
            domain_spec: self.domain_spec.clone(),
            vocab: self.vocab.clone(),
            vocab_size: self.vocab_size,
            min_frequency: self.min_freq,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required_unless_present = "manifest")]
    domain: Option<Domain>,
    #[arg(long, required_unless_present = "manifest")]
    data_dir: Option<PathBuf>,
    /// Run directory; defaults to a directory under the run root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replay the run recorded in this manifest; other flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// Use only the first N rows of the training file.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Write zero timings and no timestamps so repeated runs match byte for byte.
    #[arg(long)]
    no_wall_clock: bool,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    text: TextArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    TestHard,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::TestHard => Split::TestHard,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    domain: Domain,
    #[arg(long, required_unless_present = "input")]
    data_dir: Option<PathBuf>,
    /// Split file to score instead of one under --data-dir.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = MAX_SEQUENCE_LENGTH)]
    max_len: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    norm_config: Option<PathBuf>,
    #[arg(long)]
    domain_spec: Option<PathBuf>,
    /// Write `example_id,probability,label` rows here.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Write the report CSV here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    domain: Domain,
    /// Split file the proxies are trained on.
    #[arg(long)]
    dev: PathBuf,
    /// Split file to filter.
    #[arg(long)]
    pool: PathBuf,
    /// Fraction of the pool scoring below the hard threshold.
    #[arg(long, default_value_t = 0.5)]
    quantile: f64,
    /// Hard subset, in the pool's file format.
    #[arg(long)]
    out: PathBuf,
    /// Score manifest; defaults to `<out>.scores.csv`.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    proxies: usize,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    text: TextArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Test,
    Hard,
    None,
}

#[derive(Args)]
struct ReportArgs {
    /// Report CSVs, one table row each.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Row labels in input order; file stems otherwise.
    #[arg(long)]
    label: Vec<String>,
    /// Bundled baseline rows to show above ours.
    #[arg(long, value_enum, default_value = "test")]
    baselines: BaselineArg,
    #[arg(long)]
    title: Option<String>,
}

/// A failed command with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_config() {
            Failure::config(e.to_string())
        } else {
            Failure::runtime(e.to_string())
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

fn load_norm(path: Option<&Path>) -> Result<NormConfig, Failure> {
    match path {
        None => Ok(NormConfig::default()),
        Some(p) => NormConfig::load(p).map_err(|e| Failure::config(format!("{}: {e}", p.display()))),
    }
}

fn cmd_normalize(config: Option<&Path>) -> CmdResult {
    let cfg = load_norm(config)?;
    let stdin = io::stdin();
    let mut out = io::BufWriter::new(io::stdout().lock());
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Failure::runtime(format!("stdin: {e}")))?;
        writeln!(out, "{}", normalize(&line, &cfg)).map_err(|e| Failure::runtime(format!("stdout: {e}")))?;
    }
    out.flush().map_err(|e| Failure::runtime(format!("stdout: {e}")))
}

fn cmd_build_vocab(a: &BuildVocabArgs) -> CmdResult {
    let norm = load_norm(a.norm_config.as_deref())?;
    let cfg = TokenizerConfig {
        vocab_size: a.size,
        min_frequency: a.min_freq,
        ..TokenizerConfig::default()
    };
    let texts = if a.inputs.is_empty() {
        let mut buf = String::new();
        io::stdin()
            .read_to_string(&mut buf)
            .map_err(|e| Failure::runtime(format!("stdin: {e}")))?;
        buf.lines().map(|l| normalize(l, &norm)).collect()
    } else {
        corpus_from_files(&a.inputs, a.domain, &norm)?
    };
    let vocab = build_vocab_run(&texts, &cfg, &a.out)?;
    println!("{} tokens written to {}", vocab.len(), a.out.display());
    Ok(())
}

fn print_train_summary(s: &ethics_core::run::TrainRunSummary) {
    println!("run directory: {}", s.out_dir.display());
    println!("best epoch: {}", s.best_epoch);
    if let Some(r) = &s.val_report {
        println!("validation accuracy: {}%", percent(r.accuracy));
    }
    let epochs = s.out_dir.join(ethics_core::run::EPOCHS_FILE);
    if let Ok(text) = std::fs::read_to_string(epochs) {
        let losses: Vec<f64> = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(1)?.parse().ok())
            .collect();
        if losses.len() > 1 {
            println!("train loss: {}", sparkline(&losses));
        }
    }
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    if let Some(manifest) = &a.manifest {
        let out = a.out.clone().unwrap_or_else(|| default_run_dir("replay"));
        let summary = replay_train(manifest, &out)?;
        print_train_summary(&summary);
        return Ok(());
    }
    let (Some(domain), Some(data_dir)) = (a.domain, a.data_dir.clone()) else {
        return Err(Failure::config("--domain and --data-dir are required"));
    };
    let spec = TrainRunSpec {
        domain,
        data_dir,
        text: a.text.settings(),
        train_ratio: a.train_ratio,
        limit: a.limit,
        train: a.training.config(!a.no_wall_clock, a.patience),
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| default_run_dir(&format!("train-{domain}-seed{}", a.training.seed)));
    let summary = train_run(&spec, &out)?;
    print_train_summary(&summary);
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    let spec = EvalRunSpec {
        input: a.input.clone(),
        data_dir: a.data_dir.clone(),
        split: a.split.into(),
        norm_config: a.norm_config.clone(),
        domain_spec: a.domain_spec.clone(),
        batch_size: a.batch_size,
        max_len: a.max_len,
        limit: a.limit,
        ..EvalRunSpec::new(a.domain, a.checkpoint.clone(), a.vocab.clone())
    };
    let out = evaluate_run(&spec)?;
    let csv = report_csv(&[(a.domain.to_string(), out.report.clone())]);
    match &a.report {
        Some(p) => std::fs::write(p, &csv).map_err(|e| io_failure(p, e))?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.scores {
        std::fs::write(p, scores_csv(&out)).map_err(|e| io_failure(p, e))?;
    }
    eprint!("{}", render_confusion(&out.report.confusion));
    eprintln!("mean loss {:.6} over {} examples", out.mean_loss, out.report.n);
    for w in &out.report.warnings {
        eprintln!("warning: {w:?}");
    }
    Ok(())
}

fn cmd_filter_hard(a: &FilterArgs) -> CmdResult {
    let spec = FilterRunSpec {
        domain: a.domain,
        dev: a.dev.clone(),
        pool: a.pool.clone(),
        text: a.text.settings(),
        n_proxies: a.proxies,
        keep_quantile: a.quantile,
        seed: a.training.seed,
        proxy: a.training.config(false, None),
    };
    let summary = filter_run(&spec)?;
    let scores = a.scores.clone().unwrap_or_else(|| {
        let mut name = a.out.as_os_str().to_owned();
        name.push(".scores.csv");
        PathBuf::from(name)
    });
    for (path, body) in [(&a.out, &summary.hard_csv), (&scores, &summary.scores_csv)] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        }
        std::fs::write(path, body).map_err(|e| io_failure(path, e))?;
    }
    println!(
        "kept {} of {} examples in {}; scores in {}",
        summary.hard.len(),
        summary.pool_size,
        a.out.display(),
        scores.display()
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CmdResult {
    if !a.label.is_empty() && a.label.len() != a.inputs.len() {
        return Err(Failure::config(format!("{} labels for {} inputs", a.label.len(), a.inputs.len())));
    }
    let table = match a.baselines {
        BaselineArg::Test => Some(Table::Test),
        BaselineArg::Hard => Some(Table::Hard),
        BaselineArg::None => None,
    };
    let mut rows: Vec<_> = bundled_baselines()
        .into_iter()
        .filter(|b| Some(b.table) == table)
        .map(|b| b.row)
        .collect();
    for (i, path) in a.inputs.iter().enumerate() {
        let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let parsed = parse_report_csv(&text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        let label = a.label.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string())
        });
        let row = row_from_report(&label, &parsed).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    let title = a.title.clone().unwrap_or_else(|| match table {
        Some(Table::Hard) => "Accuracy on the hard test split".into(),
        _ => "Accuracy on the test split".into(),
    });
    print!("{}", render_comparison(&title, &rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Normalize { config } => cmd_normalize(config.as_deref()),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::FilterHard(a) => cmd_filter_hard(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
