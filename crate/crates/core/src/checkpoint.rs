//! Self-describing text snapshots of a fitted model.
//!
//! A checkpoint holds everything needed to resume training or score new
//! documents: the hyperparameters, the four global tables, the seed and
//! iteration count of the run that produced it, and fingerprints of the
//! registries it was trained against.  The layout is line-oriented text:
//!
//! ```text
//! sentopic-checkpoint 1
//! k <K>
//! t <T>
//! v <V>
//! c <C>
//! alpha <float>
//! beta <float>
//! theta <float>
//! lambda <|S| floats>
//! eta <|U| floats>
//! m <samples>
//! epsilon <float>
//! levels-s <|S| floats>
//! levels-u <|U| floats>
//! seed <u64>
//! iterations <count>
//! vocab-hash <u64>
//! users-hash <u64>
//! alpha-t
//! <K lines of 2 floats>
//! theta-t
//! <K lines of V floats>
//! lambda-t
//! <K*V lines of |S| floats, word index varying fastest>
//! eta-t
//! <K*C lines of |U| floats, user index varying fastest>
//! ```
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces the state bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::corpus::{Corpus, Registry};
use crate::inference::{GlobalState, Hyperparams};
use crate::regression::Levels;
use crate::Real;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint is malformed at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("checkpoint format version {0} is not supported (this build reads {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint does not match the corpus: {0}")]
    Mismatch(String),
    #[error("checkpoint state is invalid: {0}")]
    Invalid(String),
}

/// A fitted model together with the run metadata needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyper: Hyperparams,
    pub globals: GlobalState,
    pub seed: u64,
    pub iterations: usize,
    pub vocab_hash: u64,
    pub users_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a fingerprint of the first `upto` registry names, in index order.
///
/// A model trained against a registry stays compatible with any corpus whose
/// registry extends it, so the hash covers only the prefix the model knows.
pub fn registry_hash(reg: &Registry, upto: usize) -> u64 {
    let mut h = FNV_OFFSET;
    let mut eat = |byte: u8| {
        h ^= u64::from(byte);
        h = h.wrapping_mul(FNV_PRIME);
    };
    for name in &reg.names()[..upto] {
        for &b in name.as_bytes() {
            eat(b);
        }
        // 0xff never occurs in UTF-8, so it cannot collide with name bytes.
        eat(0xff);
    }
    h
}

impl Checkpoint {
    /// Bundles a fitted state with the registries it was trained on.
    pub fn new(
        hyper: Hyperparams,
        globals: GlobalState,
        corpus: &Corpus,
        seed: u64,
        iterations: usize,
    ) -> Self {
        let vocab_hash = registry_hash(&corpus.vocab, globals.n_words());
        let users_hash = registry_hash(&corpus.users, globals.n_users());
        Self { hyper, globals, seed, iterations, vocab_hash, users_hash }
    }

    /// Checks that `corpus` can be scored against this model: its registries
    /// must extend the ones the model was trained on, prefix-for-prefix.
    pub fn verify_registries(&self, corpus: &Corpus) -> Result<(), CheckpointError> {
        let v = self.globals.n_words();
        let c = self.globals.n_users();
        if corpus.vocab.len() < v {
            return Err(CheckpointError::Mismatch(format!(
                "corpus has {} words, model knows {v}",
                corpus.vocab.len()
            )));
        }
        if corpus.users.len() < c {
            return Err(CheckpointError::Mismatch(format!(
                "corpus has {} users, model knows {c}",
                corpus.users.len()
            )));
        }
        if registry_hash(&corpus.vocab, v) != self.vocab_hash {
            return Err(CheckpointError::Mismatch(
                "vocabulary does not extend the model's".to_owned(),
            ));
        }
        if registry_hash(&corpus.users, c) != self.users_hash {
            return Err(CheckpointError::Mismatch(
                "user registry does not extend the model's".to_owned(),
            ));
        }
        Ok(())
    }

    /// Serializes the checkpoint in the documented text layout.
    pub fn save(&self, mut w: impl Write) -> std::io::Result<()> {
        let hp = &self.hyper;
        let g = &self.globals;
        writeln!(w, "sentopic-checkpoint {FORMAT_VERSION}")?;
        writeln!(w, "k {}", hp.k)?;
        writeln!(w, "t {}", hp.t)?;
        writeln!(w, "v {}", g.n_words())?;
        writeln!(w, "c {}", g.n_users())?;
        writeln!(w, "alpha {}", hp.alpha)?;
        writeln!(w, "beta {}", hp.beta)?;
        writeln!(w, "theta {}", hp.theta)?;
        writeln!(w, "lambda {}", join(&hp.lambda))?;
        writeln!(w, "eta {}", join(&hp.eta))?;
        writeln!(w, "m {}", hp.m)?;
        writeln!(w, "epsilon {}", hp.epsilon)?;
        writeln!(w, "levels-s {}", join(&hp.levels.sentiment))?;
        writeln!(w, "levels-u {}", join(&hp.levels.preference))?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "iterations {}", self.iterations)?;
        writeln!(w, "vocab-hash {}", self.vocab_hash)?;
        writeln!(w, "users-hash {}", self.users_hash)?;
        writeln!(w, "alpha-t")?;
        let mut line = String::new();
        for row in g.alpha_t.rows() {
            writeln!(w, "{}", join_into(&mut line, row.iter()))?;
        }
        writeln!(w, "theta-t")?;
        for row in g.theta_t.rows() {
            writeln!(w, "{}", join_into(&mut line, row.iter()))?;
        }
        writeln!(w, "lambda-t")?;
        for block in g.lambda_t.outer_iter() {
            for row in block.rows() {
                writeln!(w, "{}", join_into(&mut line, row.iter()))?;
            }
        }
        writeln!(w, "eta-t")?;
        for block in g.eta_t.outer_iter() {
            for row in block.rows() {
                writeln!(w, "{}", join_into(&mut line, row.iter()))?;
            }
        }
        Ok(())
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = std::io::BufWriter::new(file);
        self.save(&mut w).and_then(|()| w.flush()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parses the layout written by [`Checkpoint::save`].
    pub fn load(r: impl Read) -> Result<Self, CheckpointError> {
        let mut lines = Lines::new(r);

        let (line_no, magic) = lines.next("header")?;
        let version = magic
            .strip_prefix("sentopic-checkpoint ")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad(line_no, "not a checkpoint file"))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }

        let k = lines.keyed("k")?.one::<usize>()?;
        let t = lines.keyed("t")?.one::<usize>()?;
        let v = lines.keyed("v")?.one::<usize>()?;
        let c = lines.keyed("c")?.one::<usize>()?;
        let alpha = lines.keyed("alpha")?.one::<Real>()?;
        let beta = lines.keyed("beta")?.one::<Real>()?;
        let theta = lines.keyed("theta")?.one::<Real>()?;
        let lambda = lines.keyed("lambda")?.many::<Real>()?;
        let eta = lines.keyed("eta")?.many::<Real>()?;
        let m = lines.keyed("m")?.one::<usize>()?;
        let epsilon = lines.keyed("epsilon")?.one::<Real>()?;
        let sentiment = lines.keyed("levels-s")?.many::<Real>()?;
        let preference = lines.keyed("levels-u")?.many::<Real>()?;
        let seed = lines.keyed("seed")?.one::<u64>()?;
        let iterations = lines.keyed("iterations")?.one::<usize>()?;
        let vocab_hash = lines.keyed("vocab-hash")?.one::<u64>()?;
        let users_hash = lines.keyed("users-hash")?.one::<u64>()?;

        let n_s = sentiment.len();
        let n_u = preference.len();
        let hyper = Hyperparams {
            alpha,
            beta,
            theta,
            lambda,
            eta,
            k,
            t,
            m,
            epsilon,
            levels: Levels { sentiment, preference },
        };
        hyper.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;

        lines.block_marker("alpha-t")?;
        let alpha_t = lines.matrix(k, 2)?;
        lines.block_marker("theta-t")?;
        let theta_t = lines.matrix(k, v)?;
        lines.block_marker("lambda-t")?;
        let lambda_t = lines.stacked(k, v, n_s)?;
        lines.block_marker("eta-t")?;
        let eta_t = lines.stacked(k, c, n_u)?;

        Ok(Self {
            hyper,
            globals: GlobalState { alpha_t, theta_t, lambda_t, eta_t },
            seed,
            iterations,
            vocab_hash,
            users_hash,
        })
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::load(BufReader::new(file))
    }
}

pub(crate) fn join(xs: &[Real]) -> String {
    let mut line = String::new();
    join_into(&mut line, xs.iter());
    line
}

fn join_into<'a>(line: &'a mut String, xs: impl Iterator<Item = &'a Real>) -> &'a str {
    line.clear();
    for (i, x) in xs.enumerate() {
        if i > 0 {
            line.push(' ');
        }
        write!(line, "{x}").unwrap();
    }
    line
}

fn bad(line: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Parse { line, reason: reason.into() }
}

/// Line reader that tracks numbering and enforces the `key value...` shape.
struct Lines<R> {
    inner: std::iter::Enumerate<std::io::Lines<BufReader<R>>>,
}

/// One header line split off its key, ready to parse.
struct Fields {
    line_no: usize,
    rest: String,
}

impl<R: Read> Lines<R> {
    fn new(r: R) -> Self {
        Self { inner: BufReader::new(r).lines().enumerate() }
    }

    fn next(&mut self, what: &str) -> Result<(usize, String), CheckpointError> {
        match self.inner.next() {
            Some((i, Ok(line))) => Ok((i + 1, line)),
            Some((i, Err(e))) => Err(bad(i + 1, e.to_string())),
            None => Err(bad(0, format!("missing {what}"))),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Fields, CheckpointError> {
        let (line_no, line) = self.next(key)?;
        match line.strip_prefix(key) {
            Some(rest) if rest.starts_with(' ') => {
                Ok(Fields { line_no, rest: rest.trim().to_owned() })
            }
            _ => Err(bad(line_no, format!("expected `{key} ...`"))),
        }
    }

    fn block_marker(&mut self, key: &str) -> Result<(), CheckpointError> {
        let (line_no, line) = self.next(key)?;
        if line != key {
            return Err(bad(line_no, format!("expected `{key}` block")));
        }
        Ok(())
    }

    fn row(&mut self, out: &mut Vec<Real>, width: usize) -> Result<(), CheckpointError> {
        let (line_no, line) = self.next("numeric row")?;
        let start = out.len();
        for field in line.split_whitespace() {
            let x = field
                .parse::<Real>()
                .ok()
                .filter(|x| x.is_finite() && *x > 0.0)
                .ok_or_else(|| bad(line_no, "entries must be positive finite numbers"))?;
            out.push(x);
        }
        if out.len() - start != width {
            return Err(bad(line_no, format!("expected {width} entries")));
        }
        Ok(())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<Real>, CheckpointError> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            self.row(&mut data, cols)?;
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("sized by construction"))
    }

    fn stacked(
        &mut self,
        outer: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Array3<Real>, CheckpointError> {
        let mut data = Vec::with_capacity(outer * rows * cols);
        for _ in 0..outer * rows {
            self.row(&mut data, cols)?;
        }
        Ok(Array3::from_shape_vec((outer, rows, cols), data).expect("sized by construction"))
    }
}

impl Fields {
    fn one<T: std::str::FromStr>(self) -> Result<T, CheckpointError> {
        self.rest
            .parse::<T>()
            .map_err(|_| bad(self.line_no, "bad value"))
    }

    fn many<T: std::str::FromStr>(self) -> Result<Vec<T>, CheckpointError> {
        let parsed: Result<Vec<T>, _> = self
            .rest
            .split_whitespace()
            .map(|f| f.parse::<T>())
            .collect();
        parsed.map_err(|_| bad(self.line_no, "bad value list"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Review;
    use crate::inference::init_globals;

    fn tiny_corpus() -> Corpus {
        let mut vocab = Registry::default();
        let mut users = Registry::default();
        for w in ["alpha", "bravo", "charlie"] {
            vocab.intern(w);
        }
        for u in ["ann", "bob"] {
            users.intern(u);
        }
        Corpus {
            reviews: vec![Review {
                doc_id: 0,
                author: 0,
                tokens: vec![0, 1, 2],
                raw_rating: 4,
                norm_rating: 0.75,
                time: 0,
                }],
            vocab,
            users,
            scale: (1, 5),
            epsilon: 1e-300,
        }
    }

    fn fitted() -> (Hyperparams, Corpus, Checkpoint) {
        let hp = Hyperparams { k: 4, t: 2, ..Hyperparams::default() };
        let corpus = tiny_corpus();
        let globals = init_globals(corpus.vocab.len(), corpus.users.len(), &hp, 11, 0.1);
        let ck = Checkpoint::new(hp.clone(), globals, &corpus, 11, 7);
        (hp, corpus, ck)
    }

    #[test]
    fn round_trip_is_exact() {
        let (hp, _, ck) = fitted();
        let mut buf = Vec::new();
        ck.save(&mut buf).unwrap();
        let back = Checkpoint::load(buf.as_slice()).unwrap();
        // Shortest round-trip formatting makes the cycle lossless, which is
        // stronger than the documented 1e-12 bound.
        assert_eq!(back, ck);
        assert_eq!(back.hyper, hp);
    }

    #[test]
    fn save_layout_leads_with_magic_and_dims() {
        let (_, _, ck) = fitted();
        let mut buf = Vec::new();
        ck.save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("sentopic-checkpoint 1"));
        assert_eq!(lines.next(), Some("k 4"));
        assert_eq!(lines.next(), Some("t 2"));
        assert_eq!(lines.next(), Some("v 3"));
        assert_eq!(lines.next(), Some("c 2"));
    }

    #[test]
    fn registry_checks_accept_extensions_and_reject_strangers() {
        let (_, corpus, ck) = fitted();
        ck.verify_registries(&corpus).unwrap();

        // An extended registry (unseen words appended) still verifies.
        let mut grown = corpus.clone();
        grown.vocab.intern("delta");
        grown.users.intern("cam");
        ck.verify_registries(&grown).unwrap();

        // A reordered vocabulary does not.
        let mut swapped = corpus.clone();
        let mut vocab = Registry::default();
        for w in ["bravo", "alpha", "charlie"] {
            vocab.intern(w);
        }
        swapped.vocab = vocab;
        assert!(matches!(
            ck.verify_registries(&swapped),
            Err(CheckpointError::Mismatch(_))
        ));

        // A smaller vocabulary than the model's is a shape error.
        let mut shrunk = corpus.clone();
        shrunk.vocab = Registry::default();
        shrunk.vocab.intern("alpha");
        assert!(matches!(
            ck.verify_registries(&shrunk),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn rejects_damaged_input() {
        let (_, _, ck) = fitted();
        let mut buf = Vec::new();
        ck.save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        // Wrong magic.
        assert!(matches!(
            Checkpoint::load("garbage 1\n".as_bytes()),
            Err(CheckpointError::Parse { line: 1, .. })
        ));

        // Unsupported version.
        let future = text.replacen("sentopic-checkpoint 1", "sentopic-checkpoint 9", 1);
        assert!(matches!(
            Checkpoint::load(future.as_bytes()),
            Err(CheckpointError::Version(9))
        ));

        // Truncation inside a numeric block.
        let cut: String = text.lines().take(25).map(|l| format!("{l}\n")).collect();
        assert!(Checkpoint::load(cut.as_bytes()).is_err());

        // A non-positive table entry.
        let poisoned = text.replacen("alpha-t\n1 ", "alpha-t\n-1 ", 1);
        assert!(matches!(
            Checkpoint::load(poisoned.as_bytes()),
            Err(CheckpointError::Parse { .. })
        ));
    }

    #[test]
    fn hash_separates_name_boundaries() {
        let mut ab_c = Registry::default();
        ab_c.intern("ab");
        ab_c.intern("c");
        let mut a_bc = Registry::default();
        a_bc.intern("a");
        a_bc.intern("bc");
        assert_ne!(registry_hash(&ab_c, 2), registry_hash(&a_bc, 2));
        // The prefix hash ignores entries past `upto`.
        let mut longer = Registry::default();
        longer.intern("ab");
        longer.intern("c");
        longer.intern("d");
        assert_eq!(registry_hash(&ab_c, 2), registry_hash(&longer, 2));
    }
}
