use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn ethics() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ethics"));
    cmd.env_remove("ETHICS_RUN_ROOT");
    cmd
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/ethics")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small model flags so a training run takes well under a second.
const TINY: &[&str] = &[
    "--epochs", "2", "--batch-size", "8", "--max-len", "32", "--layers", "1", "--heads", "2", "--d-model", "8", "--d-ff", "16",
    "--vocab-size", "200",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    run(ethics()
        .args(["train", "--domain", "justice", "--data-dir"])
        .arg(data_dir())
        .arg("--out")
        .arg(out)
        .args(TINY)
        .args(extra))
}

#[test]
fn normalize_filters_stdin() {
    let mut child = ethics()
        .arg("normalize")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"I DON'T   care!!\nfine\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(stdout(&out), "i do not care!!\nfine\n");
}

#[test]
fn build_vocab_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("v.txt");
    let out = run(ethics()
        .args(["build-vocab", "--size", "300", "--min-freq", "2", "--out"])
        .arg(&out_path)
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/sentences.txt")));
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n"));
    assert!(text.lines().count() <= 300);
}

#[test]
fn zero_learning_rate_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(&dir.path().join("run"), &["--lr", "0"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("learning rate"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_flag_and_bad_domain_exit_2() {
    assert_eq!(run(ethics().args(["train", "--bogus"])).status.code(), Some(2));
    assert_eq!(run(ethics().args(["evaluate", "--domain", "etiquette"])).status.code(), Some(2));
}

#[test]
fn defaults_follow_the_fine_tuning_table() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = run(ethics()
        .args(["train", "--domain", "justice", "--limit", "40", "--no-wall-clock", "--data-dir"])
        .arg(data_dir())
        .arg("--out")
        .arg(&run_dir));
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    let t = &manifest["spec"]["train"];
    assert_eq!(t["optim"]["eta0"], 6e-5);
    assert_eq!(t["optim"]["n_acc"], 4);
    assert_eq!(t["batch_size"], 32);
    assert_eq!(t["max_len"], 128);
    assert_eq!(t["model"]["dropout_p"], 0.3);
    assert_eq!(t["epochs"], 5);
    assert_eq!(std::fs::read_to_string(run_dir.join("epochs.csv")).unwrap().lines().count(), 6);
}

#[test]
fn same_flags_same_checkpoint_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        let out = train_tiny(d, &["--no-wall-clock", "--seed", "4"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let replay = run(ethics().args(["train", "--manifest"]).arg(a.join("manifest.json")).arg("--out").arg(&c));
    assert!(replay.status.success(), "{}", stderr(&replay));
    for f in ["model.ckpt", "last.ckpt", "epochs.csv", "vocab.txt", "manifest.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs between runs");
        assert_eq!(x, std::fs::read(c.join(f)).unwrap(), "{f} differs on replay");
    }
}

#[test]
fn run_root_variable_places_default_output() {
    let root = tempfile::tempdir().unwrap();
    let out = run(ethics()
        .env("ETHICS_RUN_ROOT", root.path())
        .args(["train", "--domain", "justice", "--no-wall-clock", "--seed", "2", "--data-dir"])
        .arg(data_dir())
        .args(TINY));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.path().join("train-justice-seed2/model.ckpt").exists());
}

#[test]
fn evaluate_matches_hand_scored_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    let report = dir.path().join("report.csv");
    let out = run(ethics()
        .args(["evaluate", "--domain", "justice", "--checkpoint"])
        .arg(fixture("eval/model.ckpt"))
        .arg("--vocab")
        .arg(fixture("eval/vocab.txt"))
        .arg("--input")
        .arg(fixture("eval/justice_test.csv"))
        .arg("--scores")
        .arg(&scores)
        .arg("--report")
        .arg(&report));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read_to_string(&report).unwrap(),
        std::fs::read_to_string(fixture("eval/expected_report.csv")).unwrap()
    );
    let score_text = std::fs::read_to_string(&scores).unwrap();
    assert_eq!(score_text.lines().count(), 1 + 10);
    assert!(stderr(&out).contains("pred 1"));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let out = run(ethics()
        .args(["evaluate", "--domain", "justice", "--checkpoint", "/nonexistent/model.ckpt", "--vocab"])
        .arg(fixture("eval/vocab.txt"))
        .arg("--input")
        .arg(fixture("eval/justice_test.csv")));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/model.ckpt"), "{}", stderr(&out));
}

#[test]
fn report_renders_rows_and_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let ours = dir.path().join("ours.csv");
    std::fs::write(
        &ours,
        "domain,accuracy,precision,recall,f1,auc,n,tp,fp,fn,tn\n\
         commonsense,86.46,80.00,80.00,80.00,90.00,4,1,1,1,1\n\
         justice,78.22,80.00,80.00,80.00,90.00,4,1,1,1,1\n\
         virtue,83.40,80.00,80.00,80.00,90.00,4,1,1,1,1\n\
         deontology,81.23,80.00,80.00,80.00,90.00,4,1,1,1,1\n",
    )
    .unwrap();
    let out = run(ethics().args(["report", "--baselines", "none"]).arg(&ours));
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Model")).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].contains("82.33"));
    assert!(table.contains("82.3275"));

    let with_base = stdout(&run(ethics().arg("report").arg(&ours)));
    let bert = with_base.lines().find(|l| l.contains("BERT-base")).unwrap();
    assert!(bert.contains("46.10"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "domain,accuracy\njustice,oops\n").unwrap();
    assert_eq!(run(ethics().arg("report").arg(&bad)).status.code(), Some(1));
}

#[test]
fn filter_hard_writes_subset_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let hard = dir.path().join("hard.csv");
    let out = run(ethics()
        .args(["filter-hard", "--domain", "deontology", "--quantile", "0.5", "--proxies", "2", "--dev"])
        .arg(data_dir().join("deontology/deontology_train.csv"))
        .arg("--pool")
        .arg(data_dir().join("deontology/deontology_test.csv"))
        .arg("--out")
        .arg(&hard)
        .args(TINY));
    assert!(out.status.success(), "{}", stderr(&out));
    let subset = std::fs::read_to_string(&hard).unwrap();
    assert!(subset.starts_with("label,scenario,excuse\n"));
    let kept = subset.lines().count() - 1;
    assert!((12..=24).contains(&kept), "kept {kept}");
    let scores = std::fs::read_to_string(dir.path().join("hard.csv.scores.csv")).unwrap();
    assert!(scores.starts_with("example_id,score\n"));
    assert_eq!(scores.lines().count(), 1 + 24);

    let bad_q = run(ethics()
        .args(["filter-hard", "--domain", "deontology", "--quantile", "1.5", "--dev"])
        .arg(data_dir().join("deontology/deontology_train.csv"))
        .arg("--pool")
        .arg(data_dir().join("deontology/deontology_test.csv"))
        .arg("--out")
        .arg(&hard)
        .args(TINY));
    assert_eq!(bad_q.status.code(), Some(2), "{}", stderr(&bad_q));
}
