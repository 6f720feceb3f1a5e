//! Held-out rating prediction against frozen global parameters.
//!
//! During prediction the rating is unobserved, so the document carries a
//! beta posterior `r_t` over it, refit each round from the same sampler the
//! training updates use.  The digamma expectations over the frozen global
//! tables are replaced by their mean ratios; the document-local beta rows
//! (sticks and the rating posterior itself) keep their digamma forms.

use std::collections::HashMap;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Corpus, Registry, Review};
use crate::inference::{
    dg, init_doc, rho_nu_pass, update_beta_doc, update_phi, update_xi, DocElog, DocState,
    ElogTables, GlobalState, Hyperparams,
};
use crate::regression::{mc_expectations, Levels};
use crate::seeds;
use crate::Real;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("document {0} has no tokens")]
    EmptyDoc(usize),
}

/// Knobs for the per-document fixed-point iteration.
#[derive(Debug, Clone)]
pub struct PredictConfig {
    /// Hard cap on local rounds.
    pub max_rounds: usize,
    /// Stop once the rating mean moves less than this between rounds.
    pub tol: Real,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { max_rounds: 30, tol: 1e-4, seed: 0 }
    }
}

/// Document state during prediction: the usual local rows plus the beta
/// posterior over the unobserved rating (both components positive).
#[derive(Debug, Clone)]
pub struct PredDocState {
    pub state: DocState,
    pub r_t: (Real, Real),
    /// Rounds actually run before the rating mean settled.
    pub rounds: usize,
}

/// Mean-ratio replacements for the digamma expectation tables: every
/// E[log x] becomes log of the posterior mean x_i / ||x||.
pub fn ratio_tables(g: &GlobalState) -> ElogTables {
    let mut theta = g.theta_t.clone();
    for mut row in theta.rows_mut() {
        let sum = row.sum();
        row.mapv_inplace(|x| (x / sum).ln());
    }
    let mut lambda = g.lambda_t.clone();
    for mut kv in lambda.rows_mut() {
        let sum = kv.sum();
        kv.mapv_inplace(|x| (x / sum).ln());
    }
    let mut eta = g.eta_t.clone();
    for mut kc in eta.rows_mut() {
        let sum = kc.sum();
        kc.mapv_inplace(|x| (x / sum).ln());
    }
    ElogTables { theta, lambda, eta }
}

/// Log mean corpus stick weights: ln E[pi_k] under independent beta sticks.
pub fn ratio_sticks(alpha_t: ArrayView2<Real>) -> Vec<Real> {
    let mut out = Vec::with_capacity(alpha_t.nrows());
    let mut prefix = 0.0;
    for row in alpha_t.rows() {
        let (a, b) = (row[0], row[1]);
        out.push((a / (a + b)).ln() + prefix);
        prefix += (b / (a + b)).ln();
    }
    out
}

/// One document's view of the ratio tables.  Unseen words and authors fall
/// back to their prior rows, whose contribution is constant across topics
/// and so cannot tilt them.
pub fn doc_ratio_elog(
    tables: &ElogTables,
    hp: &Hyperparams,
    tokens: &[usize],
    author: usize,
) -> DocElog {
    let k = tables.theta.nrows();
    let v = tables.theta.ncols();
    let c = tables.eta.shape()[1];
    let (n_s, n_u) = (hp.levels.n_s(), hp.levels.n_u());
    let theta_prior = -(v as Real).ln();
    let lam_sum: Real = hp.lambda.iter().sum();
    let eta_sum: Real = hp.eta.iter().sum();
    let theta = Array2::from_shape_fn((tokens.len(), k), |(j, kk)| {
        if tokens[j] < v {
            tables.theta[[kk, tokens[j]]]
        } else {
            theta_prior
        }
    });
    let lambda = Array3::from_shape_fn((tokens.len(), k, n_s), |(j, kk, ss)| {
        if tokens[j] < v {
            tables.lambda[[kk, tokens[j], ss]]
        } else {
            (hp.lambda[ss] / lam_sum).ln()
        }
    });
    let eta = if author < c {
        tables.eta.slice(s![.., author, ..]).to_owned()
    } else {
        Array2::from_shape_fn((k, n_u), |(_, uu)| (hp.eta[uu] / eta_sum).ln())
    };
    DocElog { theta, lambda, eta }
}

/// Word sentiment pins compiled against a vocabulary: each covered word is
/// fixed to the sentiment level nearest its lexicon value, ties going to the
/// lower level.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    level_of: HashMap<usize, usize>,
}

impl Lexicon {
    pub fn compile<'a>(
        entries: impl IntoIterator<Item = (&'a str, Real)>,
        vocab: &Registry,
        levels: &Levels,
    ) -> Self {
        let mut level_of = HashMap::new();
        for (word, value) in entries {
            if let Some(idx) = vocab.get(word) {
                level_of.insert(idx, levels.nearest_s(value));
            }
        }
        Self { level_of }
    }

    pub fn level_for(&self, word: usize) -> Option<usize> {
        self.level_of.get(&word).copied()
    }

    pub fn len(&self) -> usize {
        self.level_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.level_of.is_empty()
    }

    /// Fraction of corpus tokens the lexicon pins.
    pub fn coverage(&self, corpus: &Corpus) -> Real {
        let pinned = corpus
            .reviews
            .iter()
            .flat_map(|r| &r.tokens)
            .filter(|t| self.level_of.contains_key(t))
            .count();
        pinned as Real / corpus.n_tokens() as Real
    }
}

/// Pins every lexicon-covered sentiment row to its point mass and returns
/// the mask of pinned words; masked rows are skipped by later updates.
pub fn apply_lexicon_override(
    lex: &Lexicon,
    tokens: &[usize],
    rho: &mut Array2<Real>,
) -> Vec<bool> {
    let mut frozen = vec![false; tokens.len()];
    for (j, &w) in tokens.iter().enumerate() {
        if let Some(level) = lex.level_for(w) {
            rho.row_mut(j).fill(0.0);
            rho[[j, level]] = 1.0;
            frozen[j] = true;
        }
    }
    frozen
}

/// Moment-matched beta refit of the rating posterior from the current word
/// rows, estimated with the same sampler as training.
pub fn update_r(st: &DocState, hp: &Hyperparams, rng: &mut impl Rng) -> (Real, Real) {
    let mm = mc_expectations(
        st.rho_t.view(),
        st.nu_t.view(),
        None,
        &hp.levels,
        hp.m,
        hp.epsilon,
        rng,
    );
    (mm.e_h1.max(Real::MIN_POSITIVE), mm.e_h2.max(Real::MIN_POSITIVE))
}

/// Fixed-point local inference for one held-out document: rounds of
/// xi, phi, beta, rho, nu, then the rating refit, until the rating mean
/// settles or the round cap is hit.
pub fn predict_local_updates(
    review: &Review,
    tables: &ElogTables,
    elog_pi: &[Real],
    hp: &Hyperparams,
    cfg: &PredictConfig,
    lexicon: Option<&Lexicon>,
) -> Result<PredDocState, PredictError> {
    if review.tokens.is_empty() {
        return Err(PredictError::EmptyDoc(review.doc_id));
    }
    let elog = doc_ratio_elog(tables, hp, &review.tokens, review.author);
    let mut st = init_doc(&elog, hp);
    let frozen = lexicon.map(|lex| apply_lexicon_override(lex, &review.tokens, &mut st.rho_t));
    let mut r_t = (1.0, 1.0);
    let mut mean = 0.5;
    let mut rounds = 0;
    for round in 0..cfg.max_rounds {
        let mut rng = seeds::stream(
            cfg.seed,
            seeds::TAG_PREDICT,
            round as u64,
            review.doc_id as u64,
        );
        let w = elog.mix(st.rho_t.view(), st.nu_t.view());
        st.xi_t = update_xi(st.phi_t.view(), w.view(), elog_pi);
        st.phi_t = update_phi(st.xi_t.view(), w.view(), st.beta_t.view());
        st.beta_t = update_beta_doc(st.phi_t.view(), hp.t, hp.beta);
        let d_sum = dg(r_t.0 + r_t.1);
        rho_nu_pass(
            dg(r_t.0) - d_sum,
            dg(r_t.1) - d_sum,
            &elog,
            st.xi_t.view(),
            st.phi_t.view(),
            &mut st.rho_t,
            &mut st.nu_t,
            frozen.as_deref(),
            hp,
            &mut rng,
        );
        r_t = update_r(&st, hp, &mut rng);
        rounds = round + 1;
        let next = r_t.0 / (r_t.0 + r_t.1);
        let settled = (next - mean).abs() < cfg.tol;
        mean = next;
        if settled {
            break;
        }
    }
    Ok(PredDocState { state: st, r_t, rounds })
}

/// Denormalizes the rating posterior mean onto the original scale.
pub fn predict_rating(pred: &PredDocState, scale: (i64, i64)) -> Real {
    let mean = pred.r_t.0 / (pred.r_t.0 + pred.r_t.1);
    scale.0 as Real + mean * (scale.1 - scale.0) as Real
}

/// One scored document of a prediction run.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub doc_id: usize,
    pub raw_rating: i64,
    pub predicted: Real,
    pub abs_err: Real,
}

/// Scores every document against frozen globals; documents are independent
/// and the per-document seed streams make the result thread-count-invariant.
pub fn predict_corpus(
    corpus: &Corpus,
    globals: &GlobalState,
    hp: &Hyperparams,
    cfg: &PredictConfig,
    lexicon: Option<&Lexicon>,
) -> Result<Vec<PredictionRow>, PredictError> {
    let tables = ratio_tables(globals);
    let elog_pi = ratio_sticks(globals.alpha_t.view());
    corpus
        .reviews
        .par_iter()
        .map(|r| {
            let pred = predict_local_updates(r, &tables, &elog_pi, hp, cfg, lexicon)?;
            let predicted = predict_rating(&pred, corpus.scale);
            Ok(PredictionRow {
                doc_id: r.doc_id,
                raw_rating: r.raw_rating,
                predicted,
                abs_err: (predicted - r.raw_rating as Real).abs(),
            })
        })
        .collect()
}

/// Mean absolute error of a prediction run.
pub fn mae(rows: &[PredictionRow]) -> Real {
    rows.iter().map(|r| r.abs_err).sum::<Real>() / rows.len() as Real
}

/// MAE of always guessing the training-mean raw rating, the floor any
/// fitted model has to beat.
pub fn mean_rating_baseline(train: &Corpus, test: &Corpus) -> Real {
    let mean = train.reviews.iter().map(|r| r.raw_rating as Real).sum::<Real>()
        / train.n_docs() as Real;
    test.reviews
        .iter()
        .map(|r| (mean - r.raw_rating as Real).abs())
        .sum::<Real>()
        / test.n_docs() as Real
}
