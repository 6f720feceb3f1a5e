//! Forward simulator of the generative process with known ground truth: it
//! draws planted topics, sentiment and preference tables, then documents and
//! ratings from them, so recovery experiments have an exact oracle.

use std::io::Write;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::analytics;
use crate::corpus::{normalize_rating, Corpus, Registry, Review};
use crate::inference::{GlobalState, Hyperparams};
use crate::regression::{h_params, sample_cat, word_rating, Levels};
use crate::seeds;
use crate::Real;

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy)]
pub struct Sizes {
    pub docs: usize,
    /// Poisson mean of the document length (floored at one token).
    pub mean_len: Real,
    pub vocab: usize,
    pub users: usize,
    /// Planted topic count; keep it well below the truncation level so
    /// recovery runs exercise the slack.
    pub topics: usize,
}

/// Every latent variable behind a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Planted topic-word rows, one simplex per topic.
    pub topics: Array2<Real>,
    /// Corpus stick draws b_k.
    pub sticks: Vec<Real>,
    /// Normalized stick weights over the planted topics.
    pub weights: Vec<Real>,
    /// Planted word-sentiment rows per (topic, word).
    pub sentiment: Array3<Real>,
    /// Planted user-preference rows per (topic, user).
    pub preference: Array3<Real>,
    /// Per document: the topic of each table.
    pub table_topics: Vec<Vec<usize>>,
    /// Per document: normalized table weights from the document sticks.
    pub doc_sticks: Vec<Vec<Real>>,
    /// Per word: the table it sat at.
    pub word_tables: Vec<Vec<usize>>,
    /// Per word: the drawn sentiment level index.
    pub word_sentiments: Vec<Vec<usize>>,
    /// Per word: the drawn preference level index.
    pub word_preferences: Vec<Vec<usize>>,
    /// Continuous ratings before discretization, inside [eps, 1 - eps].
    pub ratings: Vec<Real>,
}

fn dirichlet(rng: &mut impl Rng, alphas: &[Real]) -> Vec<Real> {
    let mut out: Vec<Real> = alphas
        .iter()
        .map(|&a| {
            let g: Real = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
            // Tiny shapes can underflow to zero; keep rows strictly positive.
            g.max(Real::MIN_POSITIVE)
        })
        .collect();
    let sum: Real = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

fn beta_sample(rng: &mut impl Rng, a: Real, b: Real) -> Real {
    let x: Real = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
    let y: Real = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
    if x + y > 0.0 {
        x / (x + y)
    } else {
        a / (a + b)
    }
}

/// Stick weights over `n` components, renormalized so the truncation slack
/// is shared instead of heaped onto the last stick.
fn stick_weights(sticks: &[Real]) -> Vec<Real> {
    let mut left = 1.0;
    let mut w: Vec<Real> = sticks
        .iter()
        .map(|&b| {
            let piece = b * left;
            left *= 1.0 - b;
            piece
        })
        .collect();
    let sum: Real = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

fn letter_names(prefix: char, n: usize) -> Vec<String> {
    let mut width = 1;
    let mut cap = 26usize;
    while cap < n {
        width += 1;
        cap *= 26;
    }
    (0..n)
        .map(|mut i| {
            let mut b = vec![b'a'; width];
            for slot in (0..width).rev() {
                b[slot] = b'a' + (i % 26) as u8;
                i /= 26;
            }
            format!("{prefix}{}", String::from_utf8(b).expect("ascii"))
        })
        .collect()
}

/// Draws a corpus and its full latent state from the generative process:
/// planted tables from their Dirichlet priors, sticks from beta(1, alpha)
/// and beta(1, beta), then per document the table topics, word tables,
/// words, sentiment and preference levels, and a rating from the
/// moment-matched beta of the word ratings.  Ratings are discretized back
/// to the corpus scale so synthetic data walks the same ingestion path as
/// real data.  Deterministic given the seed.
pub fn generate(hp: &Hyperparams, sizes: Sizes, seed: u64) -> (Corpus, GroundTruth) {
    debug_assert!(sizes.topics >= 1 && sizes.topics <= hp.k);
    debug_assert!(sizes.vocab >= 1 && sizes.users >= 1 && sizes.mean_len > 0.0);
    let mut rng = seeds::stream(seed, seeds::TAG_SYNTH, 0, 0);
    let (kstar, v, c) = (sizes.topics, sizes.vocab, sizes.users);
    let (n_s, n_u) = (hp.levels.n_s(), hp.levels.n_u());
    let scale = (1i64, 5i64);

    let theta_prior = vec![hp.theta; v];
    let mut topics = Array2::zeros((kstar, v));
    for k in 0..kstar {
        let row = dirichlet(&mut rng, &theta_prior);
        topics.row_mut(k).assign(&ndarray::ArrayView1::from(&row));
    }
    let mut sentiment = Array3::zeros((kstar, v, n_s));
    for k in 0..kstar {
        for w in 0..v {
            let row = dirichlet(&mut rng, &hp.lambda);
            for (ss, &x) in row.iter().enumerate() {
                sentiment[[k, w, ss]] = x;
            }
        }
    }
    let mut preference = Array3::zeros((kstar, c, n_u));
    for k in 0..kstar {
        for u in 0..c {
            let row = dirichlet(&mut rng, &hp.eta);
            for (uu, &x) in row.iter().enumerate() {
                preference[[k, u, uu]] = x;
            }
        }
    }
    let sticks: Vec<Real> = (0..kstar).map(|_| beta_sample(&mut rng, 1.0, hp.alpha)).collect();
    let weights = stick_weights(&sticks);

    let mut vocab = Registry::default();
    for name in letter_names('w', v) {
        vocab.intern(&name);
    }
    let mut users = Registry::default();
    for name in letter_names('u', c) {
        users.intern(&name);
    }

    let length = Poisson::new(sizes.mean_len).expect("positive mean");
    let span = (scale.1 - scale.0) as Real;
    let mut reviews = Vec::with_capacity(sizes.docs);
    let mut truth = GroundTruth {
        topics,
        sticks,
        weights,
        sentiment,
        preference,
        table_topics: Vec::with_capacity(sizes.docs),
        doc_sticks: Vec::with_capacity(sizes.docs),
        word_tables: Vec::with_capacity(sizes.docs),
        word_sentiments: Vec::with_capacity(sizes.docs),
        word_preferences: Vec::with_capacity(sizes.docs),
        ratings: Vec::with_capacity(sizes.docs),
    };
    for d in 0..sizes.docs {
        let author = rng.random_range(0..c);
        let n_d = (length.sample(&mut rng) as usize).max(1);
        let doc_stick_draws: Vec<Real> =
            (0..hp.t).map(|_| beta_sample(&mut rng, 1.0, hp.beta)).collect();
        let table_w = stick_weights(&doc_stick_draws);
        let table_topics: Vec<usize> =
            (0..hp.t).map(|_| sample_cat(&mut rng, &truth.weights)).collect();
        let mut tokens = Vec::with_capacity(n_d);
        let mut z = Vec::with_capacity(n_d);
        let mut s_levels = Vec::with_capacity(n_d);
        let mut u_levels = Vec::with_capacity(n_d);
        let mut word_ratings = Vec::with_capacity(n_d);
        for _ in 0..n_d {
            let table = sample_cat(&mut rng, &table_w);
            let k = table_topics[table];
            let w = sample_cat(
                &mut rng,
                truth.topics.row(k).as_slice().expect("contiguous row"),
            );
            let s = sample_cat(
                &mut rng,
                truth.sentiment.slice(ndarray::s![k, w, ..]).as_slice().expect("contiguous"),
            );
            let u = sample_cat(
                &mut rng,
                truth
                    .preference
                    .slice(ndarray::s![k, author, ..])
                    .as_slice()
                    .expect("contiguous"),
            );
            word_ratings.push(word_rating(hp.levels.sentiment[s], hp.levels.preference[u]));
            tokens.push(w);
            z.push(table);
            s_levels.push(s);
            u_levels.push(u);
        }
        let h = h_params(&word_ratings, hp.epsilon);
        let r = beta_sample(&mut rng, h.h1, h.h2).clamp(hp.epsilon, 1.0 - hp.epsilon);
        let raw = (scale.0 + (r * span).round() as i64).clamp(scale.0, scale.1);
        reviews.push(Review {
            doc_id: d,
            author,
            tokens,
            raw_rating: raw,
            norm_rating: normalize_rating(raw, scale, hp.epsilon),
            time: d as i64,
        });
        truth.table_topics.push(table_topics);
        truth.doc_sticks.push(table_w);
        truth.word_tables.push(z);
        truth.word_sentiments.push(s_levels);
        truth.word_preferences.push(u_levels);
        truth.ratings.push(r);
    }
    let corpus = Corpus { reviews, vocab, users, scale, epsilon: hp.epsilon };
    (corpus, truth)
}

/// One planted-to-learned topic pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicMatch {
    pub planted: usize,
    pub learned: usize,
    pub cosine: Real,
    pub total_variation: Real,
}

/// How well a trained state recovered the planted structure.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// One entry per planted topic, ordered by planted index.
    pub matches: Vec<TopicMatch>,
    pub mean_cosine: Real,
    /// Fraction of qualifying words whose pooled sentiment sign agrees.
    pub sign_agreement: Real,
    /// Words that cleared the occurrence threshold.
    pub qualifying_words: usize,
}

fn cosine(a: &[Real], b: &[Real]) -> Real {
    let dot: Real = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: Real = a.iter().map(|&x| x * x).sum::<Real>().sqrt();
    let nb: Real = b.iter().map(|&x| x * x).sum::<Real>().sqrt();
    dot / (na * nb)
}

fn tv_distance(a: &[Real], b: &[Real]) -> Real {
    0.5 * a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<Real>()
}

// Near-zero pooled sentiments count as their own sign class, so an untrained
// uniform table never agrees with a planted nonzero sign by accident.
fn sign_of(x: Real) -> i8 {
    if x.abs() <= 1e-9 {
        0
    } else if x > 0.0 {
        1
    } else {
        -1
    }
}

/// Greedy one-to-one matching of planted topics to learned topics by cosine
/// similarity of word distributions, plus pooled sentiment-sign agreement on
/// words with at least `min_occurrences` corpus occurrences.  The matching
/// only looks at normalized rows, so it is invariant under permutation and
/// scaling of the learned topics.
pub fn recovery_score(
    truth: &GroundTruth,
    learned: &GlobalState,
    corpus: &Corpus,
    levels: &Levels,
    min_occurrences: usize,
) -> RecoveryReport {
    let kstar = truth.topics.nrows();
    let kl = learned.theta_t.nrows();
    let learned_rows: Vec<Vec<Real>> = (0..kl)
        .map(|k| {
            let row = learned.theta_t.row(k);
            let sum = row.sum();
            row.iter().map(|&x| x / sum).collect()
        })
        .collect();
    let planted_rows: Vec<Vec<Real>> =
        (0..kstar).map(|k| truth.topics.row(k).to_vec()).collect();

    let mut planted_free = vec![true; kstar];
    let mut learned_free = vec![true; kl];
    let mut matches = Vec::new();
    for _ in 0..kstar.min(kl) {
        let mut best: Option<(usize, usize, Real)> = None;
        for p in (0..kstar).filter(|&p| planted_free[p]) {
            for l in (0..kl).filter(|&l| learned_free[l]) {
                let cs = cosine(&planted_rows[p], &learned_rows[l]);
                if best.map_or(true, |(_, _, b)| cs > b) {
                    best = Some((p, l, cs));
                }
            }
        }
        let (p, l, cs) = best.expect("free pair available");
        planted_free[p] = false;
        learned_free[l] = false;
        matches.push(TopicMatch {
            planted: p,
            learned: l,
            cosine: cs,
            total_variation: tv_distance(&planted_rows[p], &learned_rows[l]),
        });
    }
    matches.sort_by_key(|m| m.planted);
    let mean_cosine = matches.iter().map(|m| m.cosine).sum::<Real>() / matches.len() as Real;

    let counts = analytics::word_counts(corpus);
    // Pool the planted sentiment under generative exposure (stick weight
    // times topic-word mass), mirroring how trained lambda mass concentrates
    // where a word is actually emitted; pooling every topic with equal mass
    // would let topics that never emit a word vote on its sign.
    let mut planted = truth.sentiment.clone();
    for k in 0..kstar {
        for w in 0..planted.shape()[1] {
            let mass = truth.weights[k] * truth.topics[[k, w]];
            for ss in 0..planted.shape()[2] {
                planted[[k, w, ss]] *= mass;
            }
        }
    }
    let (truth_sent, _) = analytics::overall_sentiments(planted.view(), levels);
    let (learned_sent, _) = analytics::overall_sentiments(learned.lambda_t.view(), levels);
    let mut qualifying = 0usize;
    let mut agree = 0usize;
    for w in 0..truth_sent.len().min(learned_sent.len()) {
        if counts.get(w).copied().unwrap_or(0) >= min_occurrences {
            qualifying += 1;
            if sign_of(truth_sent[w]) == sign_of(learned_sent[w]) {
                agree += 1;
            }
        }
    }
    let sign_agreement =
        if qualifying == 0 { 0.0 } else { agree as Real / qualifying as Real };
    RecoveryReport { matches, mean_cosine, sign_agreement, qualifying_words: qualifying }
}

fn ints(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes the latent state behind a generated corpus as a self-describing
/// text sidecar next to the corpus file.
pub fn write_ground_truth(mut w: impl Write, truth: &GroundTruth) -> std::io::Result<()> {
    use crate::checkpoint::join;
    let (kstar, v, n_s) = truth.sentiment.dim();
    let (_, c, n_u) = truth.preference.dim();
    writeln!(w, "sentopic-truth 1")?;
    writeln!(w, "topics {kstar} {v}")?;
    for row in truth.topics.rows() {
        writeln!(w, "{}", join(row.as_slice().expect("contiguous row")))?;
    }
    writeln!(w, "sticks {}", join(&truth.sticks))?;
    writeln!(w, "weights {}", join(&truth.weights))?;
    writeln!(w, "sentiment {kstar} {v} {n_s}")?;
    for k in 0..kstar {
        for vv in 0..v {
            let row = truth.sentiment.slice(ndarray::s![k, vv, ..]);
            writeln!(w, "{}", join(row.as_slice().expect("contiguous")))?;
        }
    }
    writeln!(w, "preference {kstar} {c} {n_u}")?;
    for k in 0..kstar {
        for cc in 0..c {
            let row = truth.preference.slice(ndarray::s![k, cc, ..]);
            writeln!(w, "{}", join(row.as_slice().expect("contiguous")))?;
        }
    }
    writeln!(w, "docs {}", truth.ratings.len())?;
    for d in 0..truth.ratings.len() {
        writeln!(w, "doc {d} {}", truth.ratings[d])?;
        writeln!(w, "y {}", ints(&truth.table_topics[d]))?;
        writeln!(w, "x {}", join(&truth.doc_sticks[d]))?;
        writeln!(w, "z {}", ints(&truth.word_tables[d]))?;
        writeln!(w, "s {}", ints(&truth.word_sentiments[d]))?;
        writeln!(w, "u {}", ints(&truth.word_preferences[d]))?;
    }
    Ok(())
}
