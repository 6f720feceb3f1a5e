//! End-to-end runs of the installed binary: every command, the documented
//! error paths, and byte-level determinism of the artifacts.

use std::path::Path;
use std::process::{Command, Output};

use sentopic::checkpoint::Checkpoint;
use sentopic::corpus::Corpus;
use sentopic::inference::{init_state, DEFAULT_PERTURB};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentopic"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs the binary, demands success, and returns stdout.
fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Runs the binary, demands a nonzero exit, and returns stderr.
fn fail(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).expect("utf-8 stderr")
}

fn s(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Writes a small synthetic corpus and returns its path.
fn synth_fixture(dir: &Path, name: &str, docs: &str, vocab: &str, seed: &str) -> String {
    let path = dir.join(name);
    ok(&[
        "synth",
        "--output",
        s(&path),
        "--docs",
        docs,
        "--vocab",
        vocab,
        "--users",
        "4",
        "--topics",
        "3",
        "--mean-len",
        "6",
        "--k",
        "6",
        "--t",
        "3",
        "--seed",
        seed,
    ]);
    s(&path).to_owned()
}

/// Train flags shared by the small fixtures; keeps runs in milliseconds.
const SMALL_MODEL: &[&str] = &["--k", "6", "--t", "3", "--m", "10"];

fn train_small(corpus: &str, ckpt: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--corpus", corpus, "--checkpoint", ckpt];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    ok(&args)
}

/// Fractional digits of a fixed-point print like `MAE 1.2345`.
fn decimals(stdout: &str, label: &str) -> String {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(label))
        .unwrap_or_else(|| panic!("no `{label}` line in {stdout:?}"));
    let value = line[label.len()..].trim();
    let (_, frac) = value.split_once('.').expect("fixed-point value");
    frac.to_owned()
}

#[test]
fn ingest_missing_file_names_path() {
    let err = fail(&["ingest", "--input", "/nowhere/reviews.jsonl", "--output", "/tmp/x"]);
    assert!(err.contains("/nowhere/reviews.jsonl"), "stderr was {err:?}");
}

#[test]
fn ingest_builds_counts_and_balances() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("reviews.jsonl");
    let mut lines = Vec::new();
    // Two authors, skewed positive, plus one malformed and one off-scale line.
    for i in 0..6 {
        let user = if i % 2 == 0 { "ann" } else { "bob" };
        let rating = if i == 0 { 1 } else { 5 };
        lines.push(format!(
            "{{\"user\":\"{user}\",\"item\":\"it\",\"rating\":{rating},\"time\":{i},\
             \"text\":\"solid build quality battery battery\"}}"
        ));
    }
    lines.push("not json".to_owned());
    lines.push(
        "{\"user\":\"ann\",\"item\":\"it\",\"rating\":9,\"time\":9,\"text\":\"nine stars\"}"
            .to_owned(),
    );
    std::fs::write(&input, lines.join("\n")).unwrap();

    let output = dir.path().join("built.corpus");
    let base = [
        "ingest",
        "--input",
        s(&input),
        "--output",
        s(&output),
        "--min-token-len",
        "1",
        "--min-term-freq",
        "1",
        "--min-author-reviews",
        "1",
    ];
    let stdout = ok(&base);
    assert!(stdout.contains("documents 6"), "stdout was {stdout:?}");
    assert!(stdout.contains("vocabulary 4"), "stdout was {stdout:?}");
    assert!(stdout.contains("users 2"), "stdout was {stdout:?}");
    assert!(
        stdout.contains("skipped 2 (1 malformed, 1 out of scale)"),
        "stdout was {stdout:?}"
    );

    let mut balanced = base.to_vec();
    balanced.push("--balance");
    let stdout = ok(&balanced);
    // One negative against five positives replicates it; counts then differ.
    assert!(stdout.contains("balance: 5 positives, 1 negatives"), "stdout was {stdout:?}");
    let built = Corpus::load_path(&output).unwrap();
    assert!(built.n_docs() > 6);
}

#[test]
fn synth_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.corpus");
    let t_a = dir.path().join("a.truth");
    let again = dir.path().join("b.corpus");
    let t_b = dir.path().join("b.truth");
    let other = dir.path().join("c.corpus");
    let gen = |out: &Path, truth: &Path, seed: &str| {
        ok(&[
            "synth", "--output", s(out), "--truth", s(truth), "--docs", "20", "--vocab",
            "15", "--users", "3", "--topics", "2", "--k", "4", "--t", "2", "--seed", seed,
        ]);
    };
    gen(&a, &t_a, "11");
    gen(&again, &t_b, "11");
    gen(&other, &dir.path().join("c.truth"), "12");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(std::fs::read(&t_a).unwrap(), std::fs::read(&t_b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn synth_rejects_empty_shapes() {
    let err = fail(&["synth", "--output", "/tmp/never.corpus", "--docs", "0"]);
    assert!(err.contains("positive"), "stderr was {err:?}");
}

#[test]
fn train_zero_iters_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let ckpt = dir.path().join("init.ckpt");
    let stdout = train_small(&corpus, s(&ckpt), &["--max-iters", "0", "--seed", "5"]);
    assert!(stdout.contains("iterations 0"), "stdout was {stdout:?}");

    let loaded = Checkpoint::load_path(&ckpt).unwrap();
    let built = Corpus::load_path(&corpus).unwrap();
    let (init, _) = init_state(&built, &loaded.hyper, 5, DEFAULT_PERTURB).unwrap();
    assert_eq!(loaded.globals, init);
    assert_eq!(loaded.iterations, 0);
}

#[test]
fn stochastic_runs_are_seed_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let first = dir.path().join("one.ckpt");
    let second = dir.path().join("two.ckpt");
    let diag = dir.path().join("steps.csv");
    let flags = ["--mode", "stochastic", "--seed", "7", "--max-steps", "25"];
    let mut with_diag = flags.to_vec();
    with_diag.extend_from_slice(&["--diagnostics", s(&diag)]);
    let stdout = train_small(&corpus, s(&first), &with_diag);
    assert!(stdout.contains("steps 25"), "stdout was {stdout:?}");
    train_small(&corpus, s(&second), &flags);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());

    let csv = std::fs::read_to_string(&diag).unwrap();
    assert_eq!(csv.lines().next(), Some("step,rate,mae,seconds"));
    assert_eq!(csv.lines().count(), 26);
}

#[test]
fn online_trend_lists_every_topic_per_fold() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "40", "15", "3");
    let ckpt = dir.path().join("online.ckpt");
    let trend = dir.path().join("trend.csv");
    let stdout = ok(&[
        "monitor",
        "--corpus",
        &corpus,
        "--checkpoint",
        s(&ckpt),
        "--trend",
        s(&trend),
        "--base",
        "10",
        "--batch-size",
        "10",
        "--k",
        "6",
        "--t",
        "3",
        "--m",
        "10",
        "--max-iters",
        "2",
    ]);
    assert!(stdout.contains("batches 3"), "stdout was {stdout:?}");

    let csv = std::fs::read_to_string(&trend).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("step,batch_end_time,topic_id,sentiment,preference,concentration")
    );
    // Base snapshot plus one per batch, six topics each.
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6 * 4);
    for step in 0..4 {
        for topic in 0..6 {
            let prefix = format!("{step},");
            let row = rows[step * 6 + topic];
            assert!(row.starts_with(&prefix), "row {row:?} at step {step}");
            assert!(row.contains(&format!(",{topic},")), "row {row:?} topic {topic}");
        }
    }
    assert!(ckpt.exists());
}

#[test]
fn monitor_requires_trend_and_online_mode() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let ckpt = dir.path().join("never.ckpt");
    let err = fail(&["monitor", "--corpus", &corpus, "--checkpoint", s(&ckpt)]);
    assert!(err.contains("--trend"), "stderr was {err:?}");
    let err = fail(&[
        "monitor",
        "--corpus",
        &corpus,
        "--checkpoint",
        s(&ckpt),
        "--trend",
        "/tmp/t.csv",
        "--mode",
        "batch",
    ]);
    assert!(err.contains("online"), "stderr was {err:?}");
}

#[test]
fn predict_prints_mae_and_lexicon_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let ckpt = dir.path().join("model.ckpt");
    train_small(&corpus, s(&ckpt), &["--max-iters", "2", "--seed", "5"]);

    let lexicon = dir.path().join("pins.lex");
    std::fs::write(&lexicon, "# pins\nwa 1.0\nwb -1\nmissingword 0\n").unwrap();
    let report = dir.path().join("pred.csv");
    let stdout = ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        &corpus,
        "--output",
        s(&report),
        "--lexicon",
        s(&lexicon),
    ]);
    assert_eq!(decimals(&stdout, "MAE ").len(), 4, "stdout was {stdout:?}");
    assert_eq!(decimals(&stdout, "lexicon coverage ").len(), 4);

    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next(), Some("doc_id,raw_rating,predicted,abs_error"));
    assert_eq!(csv.lines().count(), 22);
    assert!(csv.lines().last().unwrap().starts_with("mae,,,"));
}

#[test]
fn predict_rejects_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let ckpt = dir.path().join("model.ckpt");
    train_small(&corpus, s(&ckpt), &["--max-iters", "0"]);

    let mut empty = Corpus::load_path(&corpus).unwrap();
    empty.reviews.clear();
    let empty_path = dir.path().join("empty.corpus");
    empty.save_path(&empty_path).unwrap();
    let err = fail(&["predict", "--checkpoint", s(&ckpt), "--corpus", s(&empty_path)]);
    assert!(err.contains("no reviews"), "stderr was {err:?}");
}

#[test]
fn predict_rejects_mismatched_registries() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let ckpt = dir.path().join("model.ckpt");
    train_small(&corpus, s(&ckpt), &["--max-iters", "0"]);

    // Fewer words than the model knows: the vocab cannot extend the model's.
    let narrow = synth_fixture(dir.path(), "narrow.corpus", "20", "8", "3");
    let err = fail(&["predict", "--checkpoint", s(&ckpt), "--corpus", &narrow]);
    assert!(err.contains("does not fit the checkpoint"), "stderr was {err:?}");
}

#[test]
fn export_writes_word_topic_and_histogram_tables() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let ckpt = dir.path().join("model.ckpt");
    train_small(&corpus, s(&ckpt), &["--max-iters", "2"]);

    let words = dir.path().join("words.csv");
    let topics = dir.path().join("topics.csv");
    let hist = dir.path().join("hist.csv");
    ok(&[
        "export-sentiments",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        &corpus,
        "--output",
        s(&words),
        "--topics",
        s(&topics),
        "--histogram",
        s(&hist),
        "--bins",
        "8",
        "--min-occurrences",
        "0",
    ]);

    let csv = std::fs::read_to_string(&words).unwrap();
    assert_eq!(csv.lines().next(), Some("word,sentiment,concentration,count"));
    assert_eq!(csv.lines().count(), 16);

    let csv = std::fs::read_to_string(&topics).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("topic,sentiment,preference,concentration,top_words")
    );
    assert_eq!(csv.lines().count(), 7);

    let csv = std::fs::read_to_string(&hist).unwrap();
    assert_eq!(csv.lines().next(), Some("bin_lo,bin_hi,count"));
    assert!(csv.contains("included,,"));
}

#[test]
fn dumped_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let dumped = ok(&[
        "train",
        "--dump-config",
        "--mode",
        "stochastic",
        "--seed",
        "9",
        "--k",
        "12",
        "--max-steps",
        "40",
        "--rate",
        "0.25",
    ]);
    let path = dir.path().join("run.toml");
    std::fs::write(&path, &dumped).unwrap();
    let reloaded = ok(&["train", "--dump-config", "--config", s(&path)]);
    assert_eq!(dumped, reloaded);
    assert!(dumped.contains("mode = \"stochastic\""));
    assert!(dumped.contains("k = 12"));
}

#[test]
fn train_rejects_bad_config_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_fixture(dir.path(), "fix.corpus", "20", "15", "3");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "bogus_key = 1\n").unwrap();
    let ckpt = dir.path().join("never.ckpt");
    let err = fail(&[
        "train", "--corpus", &corpus, "--checkpoint", s(&ckpt), "--config", s(&path),
    ]);
    assert!(err.contains("bad.toml"), "stderr was {err:?}");
    assert!(!ckpt.exists());

    // Invalid truncations fail validation without touching the corpus.
    let err = fail(&[
        "train", "--corpus", "/nowhere.corpus", "--checkpoint", s(&ckpt), "--k", "2",
        "--t", "5",
    ]);
    assert!(err.contains("K >= T"), "stderr was {err:?}");
}
