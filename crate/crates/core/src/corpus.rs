//! Review ingestion, text preprocessing, rating normalization, class
//! balancing and time-ordered train/test splitting.
//!
//! Everything here is plain data plumbing: the output of this module is a
//! [`Corpus`] of index-encoded reviews plus the vocabulary and user
//! registries that the inference modules consume.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus dump is malformed at line {line}: {reason}")]
    Dump { line: usize, reason: String },
    #[error("no reviews survived preprocessing")]
    Empty,
    #[error("rating scale ({0}, {1}) is not increasing")]
    BadScale(i64, i64),
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    BadFraction(Real),
    #[error("split would leave {0} of {1} reviews in one side")]
    DegenerateSplit(usize, usize),
}

/// One unprocessed review record as it appears in the input file.
#[derive(Debug, Clone)]
pub struct RawReview {
    pub user: String,
    pub item: String,
    pub rating: i64,
    pub time: i64,
    /// Either free text or pre-lemmatized tokens, never both.
    pub body: RawBody,
}

#[derive(Debug, Clone)]
pub enum RawBody {
    Text(String),
    Tokens(Vec<String>),
}

/// Wire format for one input line; `text` and `tokens` are mutually
/// exclusive and extra fields are ignored.
#[derive(Deserialize)]
struct RawRecord {
    user: String,
    item: String,
    rating: f64,
    time: i64,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<String>>,
}

/// Per-file ingestion tally; skipped lines never abort the load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    pub malformed: usize,
    pub out_of_scale: usize,
}

impl LoadReport {
    pub fn skipped(&self) -> usize {
        self.malformed + self.out_of_scale
    }
}

/// Reads line-delimited review records, skipping (and counting) lines that
/// do not parse or whose rating falls outside `scale`.
pub fn load_reviews(
    path: impl AsRef<Path>,
    scale: (i64, i64),
) -> Result<(Vec<RawReview>, LoadReport), CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut raws = Vec::new();
    let mut report = LoadReport::default();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = match serde_json::from_str(&line) {
            Ok(rec) => rec,
            Err(_) => {
                report.malformed += 1;
                continue;
            }
        };
        let body = match (rec.text, rec.tokens) {
            (Some(text), None) => RawBody::Text(text),
            (None, Some(tokens)) => RawBody::Tokens(tokens),
            _ => {
                report.malformed += 1;
                continue;
            }
        };
        if rec.rating.fract() != 0.0 {
            report.malformed += 1;
            continue;
        }
        let rating = rec.rating as i64;
        if rating < scale.0 || rating > scale.1 {
            report.out_of_scale += 1;
            continue;
        }
        report.loaded += 1;
        raws.push(RawReview {
            user: rec.user,
            item: rec.item,
            rating,
            time: rec.time,
            body,
        });
    }
    Ok((raws, report))
}

/// Bidirectional string/index map with first-occurrence ordering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One index-encoded review.
#[derive(Debug, Clone, PartialEq)]
pub struct Review {
    pub doc_id: usize,
    pub author: usize,
    pub tokens: Vec<usize>,
    pub raw_rating: i64,
    /// Rating mapped onto [eps, 1 - eps].
    pub norm_rating: Real,
    pub time: i64,
}

impl Review {
    pub fn n_d(&self) -> usize {
        self.tokens.len()
    }
}

/// Index-encoded review collection, ordered by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub reviews: Vec<Review>,
    pub vocab: Registry,
    pub users: Registry,
    pub scale: (i64, i64),
    pub epsilon: Real,
}

impl Corpus {
    pub fn n_docs(&self) -> usize {
        self.reviews.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.reviews.iter().map(Review::n_d).sum()
    }
}

/// Text-cleaning thresholds; the defaults mirror the common review-corpus
/// recipe (drop sub-3-letter lemmas, sub-10-frequency terms, one-review
/// authors).
#[derive(Debug, Clone)]
pub struct PreprocessRules {
    pub min_token_len: usize,
    pub min_term_freq: usize,
    pub min_author_reviews: usize,
    pub stopwords: HashSet<String>,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        Self {
            min_token_len: 3,
            min_term_freq: 10,
            min_author_reviews: 2,
            stopwords: HashSet::new(),
        }
    }
}

/// Maps a raw integer rating onto the open unit interval.
///
/// Endpoints land on `eps` / `1 - eps` rather than 0/1 so the regression's
/// log terms stay finite.
pub fn normalize_rating(raw: i64, scale: (i64, i64), eps: Real) -> Real {
    let span = (scale.1 - scale.0) as Real;
    let x = (raw - scale.0) as Real / span;
    x.clamp(eps, 1.0 - eps)
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Cleans the raw reviews and builds the index-encoded corpus.
///
/// The length and stop-word filters are applied once; the frequency and
/// author filters feed each other (dropping an author lowers term counts,
/// dropping terms empties reviews), so those two run to a fixed point.
pub fn preprocess(
    raws: &[RawReview],
    rules: &PreprocessRules,
    scale: (i64, i64),
    eps: Real,
) -> Result<Corpus, CorpusError> {
    if scale.0 >= scale.1 {
        return Err(CorpusError::BadScale(scale.0, scale.1));
    }
    struct Pending<'a> {
        raw: &'a RawReview,
        tokens: Vec<String>,
    }
    let mut pending: Vec<Pending> = raws
        .iter()
        .map(|raw| {
            let tokens = match &raw.body {
                RawBody::Text(text) => tokenize(text),
                RawBody::Tokens(tokens) => tokens.clone(),
            };
            let tokens = tokens
                .into_iter()
                .filter(|t| t.chars().count() >= rules.min_token_len)
                .filter(|t| !rules.stopwords.contains(t))
                .collect();
            Pending { raw, tokens }
        })
        .collect();

    loop {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for p in &pending {
            for t in &p.tokens {
                *freq.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let keep: HashSet<String> = freq
            .into_iter()
            .filter(|&(_, n)| n >= rules.min_term_freq)
            .map(|(t, _)| t.to_owned())
            .collect();
        let mut changed = false;
        for p in &mut pending {
            let before = p.tokens.len();
            p.tokens.retain(|t| keep.contains(t));
            changed |= p.tokens.len() != before;
        }
        let before = pending.len();
        pending.retain(|p| !p.tokens.is_empty());
        let mut per_author: HashMap<&str, usize> = HashMap::new();
        for p in &pending {
            *per_author.entry(p.raw.user.as_str()).or_insert(0) += 1;
        }
        let keep_authors: HashSet<String> = per_author
            .into_iter()
            .filter(|&(_, n)| n >= rules.min_author_reviews)
            .map(|(a, _)| a.to_owned())
            .collect();
        pending.retain(|p| keep_authors.contains(&p.raw.user));
        changed |= pending.len() != before;
        if !changed {
            break;
        }
    }

    if pending.is_empty() {
        return Err(CorpusError::Empty);
    }
    pending.sort_by_key(|p| p.raw.time);

    let mut vocab = Registry::default();
    let mut users = Registry::default();
    let reviews = pending
        .iter()
        .enumerate()
        .map(|(doc_id, p)| Review {
            doc_id,
            author: users.intern(&p.raw.user),
            tokens: p.tokens.iter().map(|t| vocab.intern(t)).collect(),
            raw_rating: p.raw.rating,
            norm_rating: normalize_rating(p.raw.rating, scale, eps),
            time: p.raw.time,
        })
        .collect();
    Ok(Corpus {
        reviews,
        vocab,
        users,
        scale,
        epsilon: eps,
    })
}

/// What [`balance`] did: the replication factor and the class tallies it was
/// derived from. `factor <= 1` (or no minority class at all) means the
/// corpus was returned unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BalanceReport {
    pub positives: usize,
    pub negatives: usize,
    pub factor: usize,
}

impl BalanceReport {
    pub fn changed(&self) -> bool {
        self.negatives > 0 && self.factor > 1
    }
}

/// Replicates each negative/neutral review (raw rating < `pos_threshold`)
/// round(#pos / #neg) times so the classes come out roughly even.
///
/// Replicas are inserted adjacent to the original, so time order survives;
/// doc ids are reassigned.
pub fn balance(corpus: &Corpus, pos_threshold: i64) -> (Corpus, BalanceReport) {
    let positives = corpus
        .reviews
        .iter()
        .filter(|r| r.raw_rating >= pos_threshold)
        .count();
    let negatives = corpus.reviews.len() - positives;
    let factor = if negatives == 0 {
        1
    } else {
        ((positives as Real / negatives as Real).round() as usize).max(1)
    };
    let report = BalanceReport {
        positives,
        negatives,
        factor,
    };
    if !report.changed() {
        return (corpus.clone(), report);
    }
    let mut reviews = Vec::with_capacity(positives + negatives * factor);
    for r in &corpus.reviews {
        let copies = if r.raw_rating >= pos_threshold { 1 } else { factor };
        for _ in 0..copies {
            let mut r = r.clone();
            r.doc_id = reviews.len();
            reviews.push(r);
        }
    }
    let balanced = Corpus {
        reviews,
        vocab: corpus.vocab.clone(),
        users: corpus.users.clone(),
        scale: corpus.scale,
        epsilon: corpus.epsilon,
    };
    (balanced, report)
}

/// Splits the time-ordered corpus into a training prefix and test suffix.
///
/// Both sides index against registries rebuilt from the training prefix;
/// test-only words and users are appended after the training entries, so an
/// index at or past the training registry size marks an unseen entry.
pub fn split_by_time(corpus: &Corpus, frac: Real) -> Result<(Corpus, Corpus), CorpusError> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(CorpusError::BadFraction(frac));
    }
    let d = corpus.reviews.len();
    let n_train = (frac * d as Real).floor() as usize;
    if n_train == 0 || n_train == d {
        return Err(CorpusError::DegenerateSplit(n_train, d));
    }
    let mut vocab = Registry::default();
    let mut users = Registry::default();
    let reindex = |src: &[Review], vocab: &mut Registry, users: &mut Registry| -> Vec<Review> {
        src.iter()
            .enumerate()
            .map(|(doc_id, r)| Review {
                doc_id,
                author: users.intern(corpus.users.name(r.author)),
                tokens: r
                    .tokens
                    .iter()
                    .map(|&t| vocab.intern(corpus.vocab.name(t)))
                    .collect(),
                raw_rating: r.raw_rating,
                norm_rating: r.norm_rating,
                time: r.time,
            })
            .collect()
    };
    let train_reviews = reindex(&corpus.reviews[..n_train], &mut vocab, &mut users);
    let train = Corpus {
        reviews: train_reviews,
        vocab: vocab.clone(),
        users: users.clone(),
        scale: corpus.scale,
        epsilon: corpus.epsilon,
    };
    // The test registries extend the training ones in place.
    let test_reviews = reindex(&corpus.reviews[n_train..], &mut vocab, &mut users);
    let test = Corpus {
        reviews: test_reviews,
        vocab,
        users,
        scale: corpus.scale,
        epsilon: corpus.epsilon,
    };
    Ok((train, test))
}

impl Corpus {
    /// Serializes the corpus in the documented text layout: a header line
    /// `D N V C r_l r_h eps`, the vocabulary (one word per line), the user
    /// ids (one per line), then one line per review holding
    /// `author raw_rating time tok tok ...`.
    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            self.n_docs(),
            self.n_tokens(),
            self.vocab.len(),
            self.users.len(),
            self.scale.0,
            self.scale.1,
            self.epsilon
        )?;
        for word in self.vocab.names() {
            writeln!(w, "{word}")?;
        }
        for user in self.users.names() {
            writeln!(w, "{user}")?;
        }
        let mut line = String::new();
        for r in &self.reviews {
            line.clear();
            write!(line, "{} {} {}", r.author, r.raw_rating, r.time).unwrap();
            for &t in &r.tokens {
                write!(line, " {t}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = std::io::BufWriter::new(file);
        self.save(&mut w).and_then(|()| w.flush()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parses the layout written by [`Corpus::save`].
    pub fn load(r: impl Read) -> Result<Self, CorpusError> {
        let mut lines = BufReader::new(r).lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String), CorpusError> {
            match lines.next() {
                Some((i, Ok(line))) => Ok((i + 1, line)),
                Some((i, Err(e))) => Err(CorpusError::Dump {
                    line: i + 1,
                    reason: e.to_string(),
                }),
                None => Err(CorpusError::Dump {
                    line: 0,
                    reason: format!("missing {what}"),
                }),
            }
        };
        let (line_no, header) = next("header")?;
        let bad = |line: usize, reason: &str| CorpusError::Dump {
            line,
            reason: reason.to_owned(),
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(bad(line_no, "header needs 7 fields"));
        }
        let parse_usize = |s: &str, line: usize| {
            s.parse::<usize>().map_err(|_| bad(line, "bad count"))
        };
        let d = parse_usize(fields[0], line_no)?;
        let n = parse_usize(fields[1], line_no)?;
        let v = parse_usize(fields[2], line_no)?;
        let c = parse_usize(fields[3], line_no)?;
        let r_l = fields[4].parse::<i64>().map_err(|_| bad(line_no, "bad scale"))?;
        let r_h = fields[5].parse::<i64>().map_err(|_| bad(line_no, "bad scale"))?;
        let eps = fields[6].parse::<Real>().map_err(|_| bad(line_no, "bad epsilon"))?;
        if r_l >= r_h {
            return Err(CorpusError::BadScale(r_l, r_h));
        }
        let mut vocab = Registry::default();
        for _ in 0..v {
            let (_, word) = next("vocab entry")?;
            vocab.intern(&word);
        }
        let mut users = Registry::default();
        for _ in 0..c {
            let (_, user) = next("user entry")?;
            users.intern(&user);
        }
        if vocab.len() != v || users.len() != c {
            return Err(bad(line_no, "duplicate registry entries"));
        }
        let mut reviews = Vec::with_capacity(d);
        for doc_id in 0..d {
            let (line_no, line) = next("review line")?;
            let mut it = line.split_whitespace();
            let author = it
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&a| a < c)
                .ok_or_else(|| bad(line_no, "bad author index"))?;
            let raw_rating = it
                .next()
                .and_then(|s| s.parse::<i64>().ok())
                .filter(|&r| (r_l..=r_h).contains(&r))
                .ok_or_else(|| bad(line_no, "bad rating"))?;
            let time = it
                .next()
                .and_then(|s| s.parse::<i64>().ok())
                .ok_or_else(|| bad(line_no, "bad time"))?;
            let tokens = it
                .map(|s| {
                    s.parse::<usize>()
                        .ok()
                        .filter(|&t| t < v)
                        .ok_or_else(|| bad(line_no, "bad token index"))
                })
                .collect::<Result<Vec<usize>, _>>()?;
            if tokens.is_empty() {
                return Err(bad(line_no, "empty review"));
            }
            reviews.push(Review {
                doc_id,
                author,
                tokens,
                raw_rating,
                norm_rating: normalize_rating(raw_rating, (r_l, r_h), eps),
                time,
            });
        }
        let corpus = Corpus {
            reviews,
            vocab,
            users,
            scale: (r_l, r_h),
            epsilon: eps,
        };
        if corpus.n_tokens() != n {
            return Err(bad(line_no, "token count mismatch"));
        }
        Ok(corpus)
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::load(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn raw(user: &str, rating: i64, time: i64, text: &str) -> RawReview {
        RawReview {
            user: user.to_owned(),
            item: "p".to_owned(),
            rating,
            time,
            body: RawBody::Text(text.to_owned()),
        }
    }

    /// Rules loose enough that toy fixtures survive untouched.
    fn loose_rules() -> PreprocessRules {
        PreprocessRules {
            min_token_len: 1,
            min_term_freq: 1,
            min_author_reviews: 1,
            stopwords: HashSet::new(),
        }
    }

    #[test]
    fn load_reviews_maps_fields() {
        let f = write_lines(&[
            r#"{"user":"u1","item":"p1","rating":5,"time":1000,"text":"great battery"}"#,
        ]);
        let (raws, report) = load_reviews(f.path(), (1, 5)).unwrap();
        assert_eq!(raws.len(), 1);
        assert_eq!(raws[0].user, "u1");
        assert_eq!(raws[0].item, "p1");
        assert_eq!(raws[0].rating, 5);
        assert_eq!(raws[0].time, 1000);
        assert!(matches!(&raws[0].body, RawBody::Text(t) if t == "great battery"));
        assert_eq!(report, LoadReport { loaded: 1, malformed: 0, out_of_scale: 0 });
    }

    #[test]
    fn load_reviews_skips_out_of_scale() {
        let f = write_lines(&[
            r#"{"user":"u1","item":"p1","rating":7,"time":1000,"text":"words"}"#,
        ]);
        let (raws, report) = load_reviews(f.path(), (1, 5)).unwrap();
        assert!(raws.is_empty());
        assert_eq!(report.out_of_scale, 1);
        assert_eq!(report.skipped(), 1);
    }

    #[test]
    fn load_reviews_empty_file() {
        let f = write_lines(&[]);
        let (raws, report) = load_reviews(f.path(), (1, 5)).unwrap();
        assert!(raws.is_empty());
        assert_eq!(report.skipped(), 0);
    }

    #[test]
    fn load_reviews_counts_malformed() {
        let f = write_lines(&[
            "not json",
            r#"{"user":"u","item":"p","rating":4,"time":1}"#,
            r#"{"user":"u","item":"p","rating":4,"time":1,"text":"a","tokens":["a"]}"#,
            r#"{"user":"u","item":"p","rating":4.5,"time":1,"text":"a"}"#,
            r#"{"user":"u","item":"p","rating":4,"time":2,"tokens":["good","stuff"]}"#,
        ]);
        let (raws, report) = load_reviews(f.path(), (1, 5)).unwrap();
        assert_eq!(raws.len(), 1);
        assert!(matches!(&raws[0].body, RawBody::Tokens(t) if t.len() == 2));
        assert_eq!(report.malformed, 4);
    }

    #[test]
    fn normalize_rating_examples() {
        let eps = 1e-300;
        assert_eq!(normalize_rating(3, (1, 5), eps), 0.5);
        assert_eq!(normalize_rating(1, (1, 5), eps), eps);
        assert_eq!(normalize_rating(5, (1, 5), eps), 1.0 - eps);
    }

    #[test]
    fn normalize_rating_is_monotone_and_bounded() {
        let eps = 1e-3;
        let mut prev = Real::NEG_INFINITY;
        for raw in 1..=5 {
            let x = normalize_rating(raw, (1, 5), eps);
            assert!(x >= prev);
            assert!((eps..=1.0 - eps).contains(&x));
            prev = x;
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Great battery-life!! 100% wow"),
            vec!["great", "battery", "life", "wow"]
        );
    }

    #[test]
    fn preprocess_drops_short_tokens() {
        // "tv" falls under the 3-letter floor, the rest survive.
        let raws = vec![
            raw("a", 4, 1, "tv screen bright"),
            raw("a", 2, 2, "screen bright"),
        ];
        let rules = PreprocessRules {
            min_term_freq: 1,
            ..PreprocessRules::default()
        };
        let corpus = preprocess(&raws, &rules, (1, 5), 1e-300).unwrap();
        assert_eq!(corpus.vocab.get("tv"), None);
        assert!(corpus.vocab.get("screen").is_some());
        assert_eq!(corpus.reviews[0].n_d(), 2);
    }

    #[test]
    fn preprocess_drops_rare_tokens() {
        // "hinge" appears 9 times corpus-wide, one short of the floor.
        let mut raws = Vec::new();
        for i in 0..10 {
            let text = if i < 9 { "laptop hinge" } else { "laptop" };
            raws.push(raw(&format!("u{}", i % 2), 4, i, text));
        }
        let corpus = preprocess(&raws, &PreprocessRules::default(), (1, 5), 1e-300).unwrap();
        assert_eq!(corpus.vocab.get("hinge"), None);
        assert!(corpus.vocab.get("laptop").is_some());
        assert_eq!(corpus.n_docs(), 10);
    }

    #[test]
    fn preprocess_drops_single_review_authors() {
        let raws = vec![
            raw("a", 4, 1, "solid build"),
            raw("a", 3, 2, "solid build"),
            raw("b", 5, 3, "solid build"),
        ];
        let rules = PreprocessRules {
            min_term_freq: 1,
            ..PreprocessRules::default()
        };
        let corpus = preprocess(&raws, &rules, (1, 5), 1e-300).unwrap();
        assert_eq!(corpus.n_docs(), 2);
        assert_eq!(corpus.users.get("b"), None);
        assert_eq!(corpus.users.len(), 1);
    }

    #[test]
    fn preprocess_filters_cascade_to_a_fixed_point() {
        // Author "solo" has one review carrying two of "flaky"'s eleven
        // occurrences; dropping the author starves the term, which in turn
        // empties one of "pair"'s reviews and finally drops that author too.
        let mut raws = vec![raw("solo", 2, 0, "flaky flaky")];
        for i in 0..8 {
            raws.push(raw(&format!("bulk{}", i / 2), 4, 10 + i, "widget widget flaky"));
        }
        raws.push(raw("pair", 4, 30, "flaky"));
        raws.push(raw("pair", 5, 31, "widget"));
        let rules = PreprocessRules {
            min_token_len: 3,
            min_term_freq: 10,
            min_author_reviews: 2,
            stopwords: HashSet::new(),
        };
        let corpus = preprocess(&raws, &rules, (1, 5), 1e-300).unwrap();
        assert_eq!(corpus.vocab.get("flaky"), None);
        assert_eq!(corpus.users.get("solo"), None);
        assert_eq!(corpus.users.get("pair"), None);
        assert_eq!(corpus.n_docs(), 8);
        // The invariant the loop exists for: recounting finds no violations.
        let mut freq = HashMap::new();
        for r in &corpus.reviews {
            for &t in &r.tokens {
                *freq.entry(t).or_insert(0usize) += 1;
            }
        }
        for (&t, &n) in &freq {
            assert!(n >= rules.min_term_freq, "term {t} survives at count {n}");
            assert!(corpus.vocab.name(t).chars().count() >= rules.min_token_len);
        }
        let mut per_author = HashMap::new();
        for r in &corpus.reviews {
            *per_author.entry(r.author).or_insert(0usize) += 1;
        }
        assert!(per_author.values().all(|&n| n >= rules.min_author_reviews));
    }

    #[test]
    fn preprocess_respects_stopwords_and_sorts_by_time() {
        let raws = vec![
            raw("a", 4, 5, "the amplifier hums"),
            raw("a", 2, 1, "the amplifier"),
        ];
        let mut rules = loose_rules();
        rules.stopwords.insert("the".to_owned());
        let corpus = preprocess(&raws, &rules, (1, 5), 1e-300).unwrap();
        assert_eq!(corpus.vocab.get("the"), None);
        assert_eq!(corpus.reviews[0].time, 1);
        assert_eq!(corpus.reviews[1].time, 5);
        assert_eq!(corpus.reviews[0].doc_id, 0);
        // First-occurrence order follows the time-sorted reviews.
        assert_eq!(corpus.vocab.get("amplifier"), Some(0));
        assert_eq!(corpus.vocab.get("hums"), Some(1));
    }

    #[test]
    fn preprocess_empty_is_an_error() {
        let raws = vec![raw("a", 4, 1, "ok")];
        let err = preprocess(&raws, &PreprocessRules::default(), (1, 5), 1e-300).unwrap_err();
        assert!(matches!(err, CorpusError::Empty));
    }

    fn toy_corpus(ratings: &[i64]) -> Corpus {
        let raws: Vec<RawReview> = ratings
            .iter()
            .enumerate()
            .map(|(i, &r)| raw(&format!("u{i}"), r, i as i64, "alpha beta"))
            .collect();
        preprocess(&raws, &loose_rules(), (1, 5), 1e-300).unwrap()
    }

    #[test]
    fn balance_replicates_minority() {
        let mut ratings = vec![5; 80];
        ratings.extend(vec![2; 20]);
        let corpus = toy_corpus(&ratings);
        let (balanced, report) = balance(&corpus, 4);
        assert_eq!(report, BalanceReport { positives: 80, negatives: 20, factor: 4 });
        assert!(report.changed());
        assert_eq!(balanced.n_docs(), 160);
        let neg = balanced.reviews.iter().filter(|r| r.raw_rating <= 3).count();
        assert_eq!(neg, 80);
        // Time order and doc ids stay coherent.
        for (i, r) in balanced.reviews.iter().enumerate() {
            assert_eq!(r.doc_id, i);
        }
        assert!(balanced.reviews.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn balance_leaves_even_corpus_alone() {
        let mut ratings = vec![5; 50];
        ratings.extend(vec![1; 50]);
        let corpus = toy_corpus(&ratings);
        let (balanced, report) = balance(&corpus, 4);
        assert_eq!(report.factor, 1);
        assert!(!report.changed());
        assert_eq!(balanced, corpus);
    }

    #[test]
    fn balance_handles_missing_minority() {
        let corpus = toy_corpus(&[5, 4, 5, 4]);
        let (balanced, report) = balance(&corpus, 4);
        assert_eq!(report.negatives, 0);
        assert!(!report.changed());
        assert_eq!(balanced.n_docs(), 4);
    }

    #[test]
    fn split_by_time_examples() {
        let corpus = toy_corpus(&[5, 4, 3, 2, 1, 5, 4, 3, 2, 1]);
        let (train, test) = split_by_time(&corpus, 0.8).unwrap();
        assert_eq!(train.n_docs(), 8);
        assert_eq!(test.n_docs(), 2);
        let three = toy_corpus(&[5, 4, 3]);
        let (train, test) = split_by_time(&three, 0.5).unwrap();
        assert_eq!(train.n_docs(), 1);
        assert_eq!(test.n_docs(), 2);
        let one = toy_corpus(&[5]);
        assert!(split_by_time(&one, 0.5).is_err());
    }

    #[test]
    fn split_by_time_orders_and_flags_unseen() {
        let raws = vec![
            raw("early", 5, 1, "alpha beta"),
            raw("early", 4, 2, "beta gamma"),
            raw("late", 2, 3, "alpha delta"),
        ];
        let corpus = preprocess(&raws, &loose_rules(), (1, 5), 1e-300).unwrap();
        let (train, test) = split_by_time(&corpus, 0.67).unwrap();
        assert_eq!(train.n_docs(), 2);
        let t_max = train.reviews.iter().map(|r| r.time).max().unwrap();
        let t_min = test.reviews.iter().map(|r| r.time).min().unwrap();
        assert!(t_max <= t_min);
        // Shared prefix: train indices carry over, unseen entries extend.
        assert_eq!(train.vocab.len(), 3);
        assert_eq!(test.vocab.len(), 4);
        assert_eq!(test.vocab.get("alpha"), train.vocab.get("alpha"));
        assert_eq!(test.vocab.get("delta"), Some(3));
        assert_eq!(test.users.get("early"), Some(0));
        assert_eq!(test.users.get("late"), Some(1));
        assert_eq!(train.users.len(), 1);
        assert!(test.users.get("late").unwrap() >= train.users.len());
    }

    #[test]
    fn corpus_dump_round_trips() {
        let raws = vec![
            raw("a", 4, 10, "alpha beta alpha"),
            raw("b", 1, 20, "beta gamma"),
            raw("a", 3, 30, "gamma alpha"),
        ];
        let corpus = preprocess(&raws, &loose_rules(), (1, 5), 1e-300).unwrap();
        let mut buf = Vec::new();
        corpus.save(&mut buf).unwrap();
        let back = Corpus::load(buf.as_slice()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn corpus_load_rejects_bad_dumps() {
        let corpus = toy_corpus(&[5, 2]);
        let mut buf = Vec::new();
        corpus.save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(Corpus::load(truncated.as_bytes()).is_err());
        let mangled = text.replacen("5", "nine", 1);
        assert!(Corpus::load(mangled.as_bytes()).is_err());
    }
}
