//! Command-line surface for the pipeline: ingest raw reviews, train a model
//! in batch, stochastic, or online mode, score held-out corpora, export
//! sentiment tables, and generate synthetic fixtures.  Every command is
//! deterministic given `--seed`, and output does not depend on `--threads`.

mod config;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sentopic::analytics;
use sentopic::checkpoint::Checkpoint;
use sentopic::corpus::{self, Corpus, PreprocessRules};
use sentopic::inference::{train_batch, IterDiag};
use sentopic::predict::{self, Lexicon, PredictConfig};
use sentopic::regression::Levels;
use sentopic::svi::{train_online, train_stochastic, StepDiag};
use sentopic::synthgen::{self, Sizes};
use sentopic::Real;

use config::{Mode, RunConfig};

#[derive(Parser)]
#[command(name = "sentopic", version, about = "Joint topic, sentiment, and preference inference over review corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index-encoded corpus from line-delimited JSON reviews.
    Ingest(IngestArgs),
    /// Fit a model on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Score a held-out corpus against a checkpoint.
    Predict(PredictArgs),
    /// Online training with trend export (train --mode online shorthand).
    Monitor(TrainArgs),
    /// Export per-word and per-topic sentiment estimates from a checkpoint.
    ExportSentiments(ExportArgs),
    /// Generate a synthetic corpus with a known-ground-truth sidecar.
    Synth(SynthArgs),
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Train(a) => cmd_train(&a, false),
        Command::Predict(a) => cmd_predict(&a),
        Command::Monitor(a) => cmd_train(&a, true),
        Command::ExportSentiments(a) => cmd_export(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Sizes the global worker pool; 0 keeps the library default.
fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot size the thread pool")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::load_path(path)
        .with_context(|| format!("cannot load corpus {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load_path(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
}

// ---------------------------------------------------------------- ingest --

#[derive(Args)]
struct IngestArgs {
    /// Line-delimited JSON reviews (user, item, rating, time, text|tokens).
    #[arg(long)]
    input: PathBuf,
    /// Corpus file to write.
    #[arg(long)]
    output: PathBuf,
    /// Lowest raw rating on the scale.
    #[arg(long, default_value_t = 1)]
    scale_min: i64,
    /// Highest raw rating on the scale.
    #[arg(long, default_value_t = 5)]
    scale_max: i64,
    /// Replicate minority-polarity reviews until the classes are comparable.
    #[arg(long)]
    balance: bool,
    /// Raw rating at or above which a review counts as positive.
    #[arg(long, default_value_t = 4)]
    pos_threshold: i64,
    #[arg(long, default_value_t = 3)]
    min_token_len: usize,
    #[arg(long, default_value_t = 10)]
    min_term_freq: usize,
    #[arg(long, default_value_t = 2)]
    min_author_reviews: usize,
    /// Newline-separated stop-word list.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Rating floor; normalized ratings live in [epsilon, 1 - epsilon].
    #[arg(long, default_value_t = 1e-300)]
    epsilon: Real,
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let scale = (a.scale_min, a.scale_max);
    let (raws, report) = corpus::load_reviews(&a.input, scale)
        .with_context(|| format!("cannot read reviews from {}", a.input.display()))?;

    let mut rules = PreprocessRules {
        min_token_len: a.min_token_len,
        min_term_freq: a.min_term_freq,
        min_author_reviews: a.min_author_reviews,
        ..PreprocessRules::default()
    };
    if let Some(path) = &a.stopwords {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read stop words {}", path.display()))?;
        rules.stopwords = text
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect::<HashSet<_>>();
    }

    let mut built = corpus::preprocess(&raws, &rules, scale, a.epsilon)?;
    if a.balance {
        let (balanced, rep) = corpus::balance(&built, a.pos_threshold);
        built = balanced;
        println!(
            "balance: {} positives, {} negatives, factor {}",
            rep.positives, rep.negatives, rep.factor
        );
    }
    built
        .save_path(&a.output)
        .with_context(|| format!("cannot write corpus {}", a.output.display()))?;

    println!("documents {}", built.n_docs());
    println!("tokens {}", built.n_tokens());
    println!("vocabulary {}", built.vocab.len());
    println!("users {}", built.users.len());
    if report.skipped() > 0 {
        println!(
            "skipped {} ({} malformed, {} out of scale)",
            report.skipped(),
            report.malformed,
            report.out_of_scale
        );
    }
    Ok(())
}

// ----------------------------------------------------------------- train --

/// Scalar RunConfig fields as flags; set ones override the config file.
/// Vector priors (lambda, eta, levels) are config-file only.
#[derive(Args)]
struct Overrides {
    /// Trainer: batch, stochastic, or online.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 keeps the process default.
    #[arg(long)]
    threads: Option<usize>,
    /// Corpus topic truncation.
    #[arg(long)]
    k: Option<usize>,
    /// Per-document table truncation.
    #[arg(long)]
    t: Option<usize>,
    /// Monte-Carlo sample count for the rating link.
    #[arg(long)]
    m: Option<usize>,
    /// Corpus-level stick concentration.
    #[arg(long)]
    alpha: Option<Real>,
    /// Document-level stick concentration.
    #[arg(long)]
    beta: Option<Real>,
    /// Symmetric topic-word Dirichlet scalar.
    #[arg(long)]
    theta: Option<Real>,
    /// Rating floor.
    #[arg(long)]
    epsilon: Option<Real>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<Real>,
    #[arg(long)]
    window: Option<usize>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    wall_secs: Option<Real>,
    /// Stochastic step budget.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Probe the held-out MAE every this many steps (0 = never).
    #[arg(long)]
    probe_every: Option<usize>,
    /// Documents held out for probing.
    #[arg(long)]
    probe_docs: Option<usize>,
    /// Sample documents with replacement instead of shuffled epochs.
    #[arg(long)]
    with_replacement: bool,
    /// Reviews in the online base window.
    #[arg(long = "base")]
    base_size: Option<usize>,
    /// Reviews per online batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Self-consistency rounds per online batch.
    #[arg(long)]
    batch_cap: Option<usize>,
    /// Constant forgetting rate overriding the mode's schedule.
    #[arg(long)]
    rate: Option<Real>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(
            mode, seed, threads, k, t, m, alpha, beta, theta, epsilon, max_iters,
            tol, window, base_size, batch_size, batch_cap
        );
        // Options stay options: a set flag replaces the whole value.
        if self.wall_secs.is_some() {
            cfg.wall_secs = self.wall_secs;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if self.rate.is_some() {
            cfg.rate = self.rate;
        }
        if let Some(v) = self.probe_every {
            cfg.probe_every = v;
        }
        if let Some(v) = self.probe_docs {
            cfg.probe_docs = v;
        }
        if self.with_replacement {
            cfg.with_replacement = true;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file from `ingest` or `synth`.
    #[arg(long, required_unless_present = "dump_config")]
    corpus: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long, required_unless_present = "dump_config")]
    checkpoint: Option<PathBuf>,
    /// TOML file supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    dump_config: bool,
    /// Per-iteration diagnostics CSV.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Trend series CSV (online mode only).
    #[arg(long)]
    trend: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn effective_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, monitor: bool) -> Result<()> {
    let mut cfg = effective_config(a.config.as_deref(), &a.overrides)?;
    if monitor {
        match cfg.mode {
            Mode::Online => {}
            _ if a.overrides.mode.is_some() => bail!("monitor only runs online"),
            _ => cfg.mode = Mode::Online,
        }
        if a.trend.is_none() {
            bail!("monitor requires --trend");
        }
    }
    if a.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let hp = cfg.hyperparams()?;
    init_threads(cfg.threads)?;

    let corpus_path = a.corpus.as_deref().expect("clap requires --corpus");
    let ckpt_path = a.checkpoint.as_deref().expect("clap requires --checkpoint");
    let corpus = load_corpus(corpus_path)?;

    let (globals, iterations) = match cfg.mode {
        Mode::Batch => {
            let (globals, diags) = train_batch(&corpus, &hp, &cfg.stop_rule(), cfg.seed)?;
            if let Some(path) = &a.diagnostics {
                write_iter_diags(path, &diags)?;
            }
            println!("iterations {}", diags.len());
            if let Some(last) = diags.last() {
                println!("training MAE {:.4}", last.mae);
            }
            (globals, diags.len())
        }
        Mode::Stochastic => {
            let (globals, diags) =
                train_stochastic(&corpus, &hp, &cfg.stochastic(), cfg.seed)?;
            if let Some(path) = &a.diagnostics {
                write_step_diags(path, &diags)?;
            }
            println!("steps {}", diags.len());
            if let Some(mae) = diags.iter().rev().find_map(|d| d.mae) {
                println!("probe MAE {mae:.4}");
            }
            (globals, diags.len())
        }
        Mode::Online => {
            let (base, batches) = split_stream(&corpus, cfg.base_size, cfg.batch_size)?;
            let (globals, series) =
                train_online(&base, &batches, &cfg.online(), &hp, cfg.seed)?;
            if let Some(path) = &a.trend {
                let mut w = create(path)?;
                analytics::write_trend_csv(&mut w, &series)?;
                w.flush().context("cannot flush trend file")?;
            }
            println!("batches {}", batches.len());
            if !series.skipped.is_empty() {
                println!("skipped {} empty batches", series.skipped.len());
            }
            (globals, series.steps().len())
        }
    };

    Checkpoint::new(hp, globals, &corpus, cfg.seed, iterations)
        .save_path(ckpt_path)
        .with_context(|| format!("cannot write checkpoint {}", ckpt_path.display()))?;
    Ok(())
}

/// Splits one time-ordered corpus into a base window and fixed-size batches,
/// all sharing the parent registries.
fn split_stream(parent: &Corpus, base: usize, batch: usize) -> Result<(Corpus, Vec<Corpus>)> {
    let d = parent.reviews.len();
    if base == 0 || base > d {
        bail!("--base must be in 1..={d} (corpus has {d} reviews)");
    }
    if batch == 0 {
        bail!("--batch-size must be positive");
    }
    let sub = |lo: usize, hi: usize| Corpus {
        reviews: parent.reviews[lo..hi].to_vec(),
        vocab: parent.vocab.clone(),
        users: parent.users.clone(),
        scale: parent.scale,
        epsilon: parent.epsilon,
    };
    let batches = (base..d)
        .step_by(batch)
        .map(|lo| sub(lo, (lo + batch).min(d)))
        .collect();
    Ok((sub(0, base), batches))
}

fn write_iter_diags(path: &Path, diags: &[IterDiag]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "iteration,mae,seconds")?;
    for d in diags {
        writeln!(w, "{},{},{}", d.iteration, d.mae, d.seconds)?;
    }
    w.flush().context("cannot flush diagnostics")
}

fn write_step_diags(path: &Path, diags: &[StepDiag]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,rate,mae,seconds")?;
    for d in diags {
        let mae = d.mae.map(|m| m.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{mae},{}", d.step, d.rate, d.seconds)?;
    }
    w.flush().context("cannot flush diagnostics")
}

// --------------------------------------------------------------- predict --

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out corpus to score.
    #[arg(long)]
    corpus: PathBuf,
    /// Per-document prediction CSV.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Sentiment pins, one "word value" pair per line.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    init_threads(a.threads)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let held = load_corpus(&a.corpus)?;
    if held.reviews.is_empty() {
        bail!("corpus {} has no reviews to score", a.corpus.display());
    }
    ckpt.verify_registries(&held)
        .with_context(|| format!("corpus {} does not fit the checkpoint", a.corpus.display()))?;

    let lexicon = match &a.lexicon {
        Some(path) => {
            let lex = load_lexicon(path, &held, &ckpt.hyper.levels)?;
            println!("lexicon coverage {:.4}", lex.coverage(&held));
            Some(lex)
        }
        None => None,
    };

    let cfg = PredictConfig { seed: a.seed, ..PredictConfig::default() };
    let rows = predict::predict_corpus(&held, &ckpt.globals, &ckpt.hyper, &cfg, lexicon.as_ref())?;
    if let Some(path) = &a.output {
        let mut w = create(path)?;
        analytics::write_predictions_csv(&mut w, &rows)?;
        w.flush().context("cannot flush predictions")?;
    }
    println!("documents {}", rows.len());
    println!("MAE {:.4}", predict::mae(&rows));
    Ok(())
}

/// Parses "word value" lines; `#` starts a comment, blank lines are skipped.
/// Words absent from the vocabulary are ignored by compilation.
fn load_lexicon(path: &Path, held: &Corpus, levels: &Levels) -> Result<Lexicon> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read lexicon {}", path.display()))?;
    let mut entries: Vec<(&str, Real)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(word), Some(value), None) = (it.next(), it.next(), it.next()) else {
            bail!("{}:{}: expected `word value`", path.display(), no + 1);
        };
        let value: Real = value
            .parse()
            .with_context(|| format!("{}:{}: bad sentiment value", path.display(), no + 1))?;
        entries.push((word, value));
    }
    Ok(Lexicon::compile(entries, &held.vocab, levels))
}

// ---------------------------------------------------------------- export --

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus supplying word/user names and occurrence counts.
    #[arg(long)]
    corpus: PathBuf,
    /// Per-word sentiment CSV.
    #[arg(long)]
    output: PathBuf,
    /// Optional per-topic summary CSV.
    #[arg(long)]
    topics: Option<PathBuf>,
    /// Optional sentiment histogram CSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Words listed per topic in the summary.
    #[arg(long, default_value_t = 10)]
    top_words: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Histogram floor: only words seen more often than this are binned.
    #[arg(long, default_value_t = 20)]
    min_occurrences: usize,
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let named = load_corpus(&a.corpus)?;
    ckpt.verify_registries(&named)
        .with_context(|| format!("corpus {} does not fit the checkpoint", a.corpus.display()))?;
    let levels = &ckpt.hyper.levels;

    let mut w = create(&a.output)?;
    analytics::write_word_sentiments_csv(&mut w, &named, ckpt.globals.lambda_t.view(), levels)?;
    w.flush().context("cannot flush word sentiments")?;

    if let Some(path) = &a.topics {
        let mut w = create(path)?;
        analytics::write_topic_summary_csv(&mut w, &named, &ckpt.globals, levels, a.top_words)?;
        w.flush().context("cannot flush topic summary")?;
    }
    if let Some(path) = &a.histogram {
        let counts = analytics::word_counts(&named);
        let hist = analytics::sentiment_histogram(
            ckpt.globals.lambda_t.view(),
            levels,
            &counts,
            a.min_occurrences,
            a.bins,
        );
        let mut w = create(path)?;
        analytics::write_histogram_csv(&mut w, &hist)?;
        w.flush().context("cannot flush histogram")?;
        println!("histogram words {}", hist.included);
    }
    println!("words {}", ckpt.globals.n_words());
    println!("topics {}", ckpt.globals.n_topics());
    Ok(())
}

// ----------------------------------------------------------------- synth --

#[derive(Args)]
struct SynthArgs {
    /// Corpus file to write.
    #[arg(long)]
    output: PathBuf,
    /// Ground-truth sidecar to write alongside the corpus.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    docs: usize,
    /// Poisson mean of the document length (floored at one token).
    #[arg(long, default_value_t = 40.0)]
    mean_len: Real,
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    #[arg(long, default_value_t = 50)]
    users: usize,
    /// Planted topic count.
    #[arg(long, default_value_t = 5)]
    topics: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus topic truncation of the generating hyperparameters.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Tables per generated document.
    #[arg(long, default_value_t = 10)]
    t: usize,
    /// Topic-word Dirichlet scalar; smaller means spikier planted topics.
    #[arg(long, default_value_t = 0.1)]
    theta: Real,
    /// Corpus-level stick concentration.
    #[arg(long, default_value_t = 1.0 + 1e-10)]
    alpha: Real,
    /// Document-level stick concentration.
    #[arg(long, default_value_t = 1.0 + 1e-10)]
    beta: Real,
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.docs == 0 || a.vocab == 0 || a.users == 0 || a.topics == 0 {
        bail!("--docs, --vocab, --users, and --topics must be positive");
    }
    if a.topics > a.k {
        bail!("--topics must not exceed --k");
    }
    let hp = sentopic::inference::Hyperparams {
        alpha: a.alpha,
        beta: a.beta,
        theta: a.theta,
        k: a.k,
        t: a.t,
        ..sentopic::inference::Hyperparams::default()
    };
    hp.validate()?;
    let sizes = Sizes {
        docs: a.docs,
        mean_len: a.mean_len,
        vocab: a.vocab,
        users: a.users,
        topics: a.topics,
    };
    let (generated, truth) = synthgen::generate(&hp, sizes, a.seed);
    generated
        .save_path(&a.output)
        .with_context(|| format!("cannot write corpus {}", a.output.display()))?;
    if let Some(path) = &a.truth {
        let mut w = create(path)?;
        synthgen::write_ground_truth(&mut w, &truth)
            .with_context(|| format!("cannot write ground truth {}", path.display()))?;
        w.flush().context("cannot flush ground truth")?;
    }
    println!("documents {}", generated.n_docs());
    println!("tokens {}", generated.n_tokens());
    println!("vocabulary {}", generated.vocab.len());
    println!("users {}", generated.users.len());
    Ok(())
}
