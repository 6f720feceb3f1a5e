//! Variational state containers and the coordinate-ascent updates they move
//! under, plus the batch trainer.
//!
//! Naming follows the model: `alpha_t`/`beta_t` are the corpus and document
//! stick beta parameters, `theta_t` the topic-word Dirichlet parameters,
//! `lambda_t` the per-topic word-sentiment tables, `eta_t` the per-topic
//! user-preference tables; `xi_t`, `phi_t`, `rho_t`, `nu_t` are the
//! per-document assignment categoricals. The `_t` suffix marks a variational
//! (tilde) parameter as opposed to its prior scalar.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Corpus, Review};
use crate::numerics::{digamma, normalize_log};
use crate::regression::{safe_ln, DocSampler, HeldVar, Levels};
use crate::{seeds, Real};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("hyperparameters invalid: {0}")]
    BadHyperparams(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Model priors and structural constants.
///
/// `alpha`/`beta` sit just above 1 so the stick digammas stay finite, per
/// the usual truncated-stick recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Corpus-level stick concentration.
    pub alpha: Real,
    /// Document-level stick concentration.
    pub beta: Real,
    /// Symmetric topic-word Dirichlet scalar.
    pub theta: Real,
    /// Word-sentiment Dirichlet, one entry per sentiment level.
    pub lambda: Vec<Real>,
    /// User-preference Dirichlet, one entry per preference level.
    pub eta: Vec<Real>,
    /// Corpus topic truncation.
    pub k: usize,
    /// Per-document table truncation.
    pub t: usize,
    /// Monte-Carlo sample count for the rating link.
    pub m: usize,
    /// Rating floor; ratings and means live in [epsilon, 1 - epsilon].
    pub epsilon: Real,
    pub levels: Levels,
}

impl Default for Hyperparams {
    fn default() -> Self {
        let levels = Levels::default();
        Self {
            alpha: 1.0 + 1e-10,
            beta: 1.0 + 1e-10,
            theta: 0.1,
            lambda: vec![1.0; levels.n_s()],
            eta: vec![1.0; levels.n_u()],
            k: 100,
            t: 10,
            m: 50,
            epsilon: 1e-300,
            levels,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |msg: &str| Err(InferenceError::BadHyperparams(msg.to_owned()));
        self.levels
            .validate()
            .map_err(|e| InferenceError::BadHyperparams(e.to_string()))?;
        if !(self.alpha > 1.0) || !(self.beta > 1.0) {
            return bad("stick concentrations must exceed 1");
        }
        if !(self.theta > 0.0) {
            return bad("theta prior must be positive");
        }
        if self.lambda.len() != self.levels.n_s() || self.lambda.iter().any(|&x| !(x > 0.0)) {
            return bad("lambda prior needs one positive entry per sentiment level");
        }
        if self.eta.len() != self.levels.n_u() || self.eta.iter().any(|&x| !(x > 0.0)) {
            return bad("eta prior needs one positive entry per preference level");
        }
        if self.k < self.t || self.t < 1 {
            return bad("truncations must satisfy K >= T >= 1");
        }
        if self.m < 1 {
            return bad("sample count must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return bad("epsilon must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// Corpus-level variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// K beta pairs for the corpus sticks, stored as standard parameters.
    pub alpha_t: Array2<Real>,
    /// K x V topic-word Dirichlet parameters.
    pub theta_t: Array2<Real>,
    /// K x V x |S| word-sentiment Dirichlet parameters.
    pub lambda_t: Array3<Real>,
    /// K x C x |U| user-preference Dirichlet parameters.
    pub eta_t: Array3<Real>,
}

impl GlobalState {
    pub fn n_topics(&self) -> usize {
        self.theta_t.nrows()
    }

    pub fn n_words(&self) -> usize {
        self.theta_t.ncols()
    }

    pub fn n_users(&self) -> usize {
        self.eta_t.shape()[1]
    }
}

/// Per-document variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DocState {
    /// T beta pairs for the document sticks (standard parameters).
    pub beta_t: Array2<Real>,
    /// T x K table-to-topic categoricals.
    pub xi_t: Array2<Real>,
    /// n_d x T word-to-table categoricals.
    pub phi_t: Array2<Real>,
    /// n_d x |S| word sentiment categoricals.
    pub rho_t: Array2<Real>,
    /// n_d x |U| word preference categoricals.
    pub nu_t: Array2<Real>,
}

/// E[log pi_k] for every candidate under truncated stick-breaking: the
/// chosen stick's log expectation plus the log remainders of everything
/// before it. `pairs` holds (a, b) beta parameters per stick.
pub fn elog_sticks(pairs: ArrayView2<Real>) -> Vec<Real> {
    let mut out = Vec::with_capacity(pairs.nrows());
    let mut prefix = 0.0;
    for row in pairs.rows() {
        let (a, b) = (row[0], row[1]);
        let d_sum = digamma(a + b).expect("positive beta parameters");
        out.push(digamma(a).expect("positive beta parameters") - d_sum + prefix);
        prefix += digamma(b).expect("positive beta parameters") - d_sum;
    }
    out
}

/// Dense tables of E[log x] = digamma(x) - digamma(row sum) for every global
/// Dirichlet row. Worth materializing for batch sweeps, where every column
/// gets hit many times per iteration.
pub struct ElogTables {
    /// K x V.
    pub theta: Array2<Real>,
    /// K x V x |S|.
    pub lambda: Array3<Real>,
    /// K x C x |U|.
    pub eta: Array3<Real>,
}

pub(crate) fn dg(x: Real) -> Real {
    digamma(x).expect("positive Dirichlet parameter")
}

impl ElogTables {
    pub fn from_globals(g: &GlobalState) -> Self {
        let mut theta = g.theta_t.clone();
        for mut row in theta.rows_mut() {
            let d_sum = dg(row.sum());
            row.mapv_inplace(|x| dg(x) - d_sum);
        }
        let mut lambda = g.lambda_t.clone();
        for mut kv in lambda.rows_mut() {
            let d_sum = dg(kv.sum());
            kv.mapv_inplace(|x| dg(x) - d_sum);
        }
        let mut eta = g.eta_t.clone();
        for mut kc in eta.rows_mut() {
            let d_sum = dg(kc.sum());
            kc.mapv_inplace(|x| dg(x) - d_sum);
        }
        Self { theta, lambda, eta }
    }
}

/// The slices of the global E[log x] tables one document actually reads:
/// its word columns and its author's preference rows.
pub struct DocElog {
    /// n_d x K.
    pub theta: Array2<Real>,
    /// n_d x K x |S|.
    pub lambda: Array3<Real>,
    /// K x |U| for the document's author.
    pub eta: Array2<Real>,
}

impl DocElog {
    /// Gathers the document's columns out of precomputed tables.
    pub fn from_tables(tables: &ElogTables, tokens: &[usize], author: usize) -> Self {
        let k = tables.theta.nrows();
        let n_s = tables.lambda.shape()[2];
        let theta = Array2::from_shape_fn((tokens.len(), k), |(j, kk)| {
            tables.theta[[kk, tokens[j]]]
        });
        let lambda = Array3::from_shape_fn((tokens.len(), k, n_s), |(j, kk, ss)| {
            tables.lambda[[kk, tokens[j], ss]]
        });
        let eta = tables.eta.slice(s![.., author, ..]).to_owned();
        Self { theta, lambda, eta }
    }

    /// Computes the same slices straight from the global state, touching
    /// only the document's words; this is the cheap path when single
    /// documents are visited sparsely (stochastic/online training,
    /// prediction).
    pub fn from_globals(g: &GlobalState, tokens: &[usize], author: usize) -> Self {
        let k = g.n_topics();
        let n_s = g.lambda_t.shape()[2];
        let n_u = g.eta_t.shape()[2];
        let n = tokens.len();
        // Distinct-word indirection: repeated tokens share one computation.
        let mut first_at: Vec<(usize, usize)> = Vec::new();
        let mut source = vec![usize::MAX; n];
        for (j, &w) in tokens.iter().enumerate() {
            match first_at.iter().find(|&&(tok, _)| tok == w) {
                Some(&(_, at)) => source[j] = at,
                None => {
                    first_at.push((w, j));
                    source[j] = j;
                }
            }
        }
        let mut theta = Array2::zeros((n, k));
        let mut lambda = Array3::zeros((n, k, n_s));
        for kk in 0..k {
            let row = g.theta_t.row(kk);
            let d_sum = dg(row.sum());
            for &(w, j) in &first_at {
                theta[[j, kk]] = dg(row[w]) - d_sum;
                let lam = g.lambda_t.slice(s![kk, w, ..]);
                let d_lam = dg(lam.sum());
                for ss in 0..n_s {
                    lambda[[j, kk, ss]] = dg(lam[ss]) - d_lam;
                }
            }
        }
        for j in 0..n {
            let from = source[j];
            if from != j {
                let row = theta.row(from).to_owned();
                theta.row_mut(j).assign(&row);
                let block = lambda.slice(s![from, .., ..]).to_owned();
                lambda.slice_mut(s![j, .., ..]).assign(&block);
            }
        }
        let mut eta = Array2::zeros((k, n_u));
        for kk in 0..k {
            let row = g.eta_t.slice(s![kk, author, ..]);
            let d_sum = dg(row.sum());
            for uu in 0..n_u {
                eta[[kk, uu]] = dg(row[uu]) - d_sum;
            }
        }
        Self { theta, lambda, eta }
    }

    /// The per-word topic affinity matrix W (n_d x K): word log-likelihood
    /// under topic k with the sentiment and preference terms mixed in under
    /// the current word categoricals.
    pub fn mix(&self, rho: ArrayView2<Real>, nu: ArrayView2<Real>) -> Array2<Real> {
        let (n, k) = self.theta.dim();
        let mut w = self.theta.clone();
        let eta_mix = nu.dot(&self.eta.t());
        for j in 0..n {
            for kk in 0..k {
                w[[j, kk]] += self.lambda.slice(s![j, kk, ..]).dot(&rho.row(j)) + eta_mix[[j, kk]];
            }
        }
        w
    }
}

/// Initial global parameters: priors broadcast everywhere, with a uniform
/// perturbation of at most `perturb * theta` added to the topic-word table
/// so the first table-topic scores can tell topics apart.
pub fn init_globals(
    v: usize,
    c: usize,
    hp: &Hyperparams,
    seed: u64,
    perturb: Real,
) -> GlobalState {
    let mut rng = seeds::stream(seed, seeds::TAG_INIT, 0, 0);
    let mut theta_t = Array2::from_elem((hp.k, v), hp.theta);
    if perturb > 0.0 {
        theta_t.mapv_inplace(|x| x + perturb * hp.theta * rng.random::<Real>());
    }
    let alpha_t = Array2::from_shape_fn((hp.k, 2), |(_, i)| if i == 0 { 1.0 } else { hp.alpha });
    let lambda_t =
        Array3::from_shape_fn((hp.k, v, hp.lambda.len()), |(_, _, ss)| hp.lambda[ss]);
    let eta_t = Array3::from_shape_fn((hp.k, c, hp.eta.len()), |(_, _, uu)| hp.eta[uu]);
    GlobalState { alpha_t, theta_t, lambda_t, eta_t }
}

/// Fraction of theta used for symmetry breaking unless a caller asks
/// otherwise.
pub const DEFAULT_PERTURB: Real = 0.1;

/// Initial document parameters: uniform categoricals and prior sticks, then
/// one data-only pass of the table-topic and word-table scores (the stick
/// terms carry no data yet and would only tilt every document toward low
/// indices, so they are left out of this first pass).
pub fn init_doc(elog: &DocElog, hp: &Hyperparams) -> DocState {
    let n = elog.theta.nrows();
    let rho_t = Array2::from_elem((n, hp.levels.n_s()), 1.0 / hp.levels.n_s() as Real);
    let nu_t = Array2::from_elem((n, hp.levels.n_u()), 1.0 / hp.levels.n_u() as Real);
    let w = elog.mix(rho_t.view(), nu_t.view());
    let phi_uniform = Array2::from_elem((n, hp.t), 1.0 / hp.t as Real);
    let mut xi_t = phi_uniform.t().dot(&w);
    for mut row in xi_t.rows_mut() {
        normalize_log(row.as_slice_mut().expect("contiguous row")).expect("finite scores");
    }
    let mut phi_t = w.dot(&xi_t.t());
    for mut row in phi_t.rows_mut() {
        normalize_log(row.as_slice_mut().expect("contiguous row")).expect("finite scores");
    }
    let beta_t = Array2::from_shape_fn((hp.t, 2), |(_, i)| if i == 0 { 1.0 } else { hp.beta });
    DocState { beta_t, xi_t, phi_t, rho_t, nu_t }
}

/// Initializes the full training state for a corpus.
pub fn init_state(
    corpus: &Corpus,
    hp: &Hyperparams,
    seed: u64,
    perturb: Real,
) -> Result<(GlobalState, Vec<DocState>), InferenceError> {
    hp.validate()?;
    if corpus.reviews.is_empty() {
        return Err(InferenceError::EmptyCorpus);
    }
    let globals = init_globals(corpus.vocab.len(), corpus.users.len(), hp, seed, perturb);
    let tables = ElogTables::from_globals(&globals);
    let states = corpus
        .reviews
        .par_iter()
        .map(|r| init_doc(&DocElog::from_tables(&tables, &r.tokens, r.author), hp))
        .collect();
    Ok((globals, states))
}

/// Table-topic update: row t scores candidate k by the corpus stick term
/// plus the phi-weighted word affinities.
pub fn update_xi(
    phi: ArrayView2<Real>,
    w: ArrayView2<Real>,
    elog_pi: &[Real],
) -> Array2<Real> {
    let mut xi = phi.t().dot(&w);
    for mut row in xi.rows_mut() {
        let scores = row.as_slice_mut().expect("contiguous row");
        for (x, &pi) in scores.iter_mut().zip(elog_pi) {
            *x += pi;
        }
        normalize_log(scores).expect("finite scores");
    }
    xi
}

/// Word-table update: word j scores table t by the document stick term plus
/// the xi-weighted word affinities.
pub fn update_phi(
    xi: ArrayView2<Real>,
    w: ArrayView2<Real>,
    beta_t: ArrayView2<Real>,
) -> Array2<Real> {
    let sticks = elog_sticks(beta_t);
    let mut phi = w.dot(&xi.t());
    for mut row in phi.rows_mut() {
        let scores = row.as_slice_mut().expect("contiguous row");
        for (x, &st) in scores.iter_mut().zip(&sticks) {
            *x += st;
        }
        normalize_log(scores).expect("finite scores");
    }
    phi
}

/// Word sentiment/preference update. For every word, each candidate level
/// is scored by the Monte-Carlo rating term (the candidate held, everything
/// else sampled) plus the topic-weighted table expectation; the sentiment
/// row is refreshed first, then the preference row against it, then the
/// sampler is brought in line with the new rows.
#[allow(clippy::too_many_arguments)]
pub fn update_rho_nu(
    r_d: Real,
    elog: &DocElog,
    xi: ArrayView2<Real>,
    phi: ArrayView2<Real>,
    rho: &mut Array2<Real>,
    nu: &mut Array2<Real>,
    hp: &Hyperparams,
    rng: &mut impl Rng,
) {
    let log_r = safe_ln(r_d, hp.epsilon);
    let log_1mr = safe_ln(1.0 - r_d, hp.epsilon);
    rho_nu_pass(log_r, log_1mr, elog, xi, phi, rho, nu, None, hp, rng);
}

/// The word loop behind [`update_rho_nu`], parameterized so prediction can
/// feed the digamma expectations of its rating posterior where training
/// feeds the observed rating, and pin lexicon-fixed sentiment rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rho_nu_pass(
    log_r: Real,
    log_1mr: Real,
    elog: &DocElog,
    xi: ArrayView2<Real>,
    phi: ArrayView2<Real>,
    rho: &mut Array2<Real>,
    nu: &mut Array2<Real>,
    frozen: Option<&[bool]>,
    hp: &Hyperparams,
    rng: &mut impl Rng,
) {
    let n = rho.nrows();
    let (n_s, n_u) = (hp.levels.n_s(), hp.levels.n_u());
    let p = phi.dot(&xi); // n_d x K topic weights per word
    let mut sampler = DocSampler::new(rho.view(), nu.view(), &hp.levels, hp.m, rng);
    for j in 0..n {
        let q_j = p.row(j);
        if !frozen.is_some_and(|f| f[j]) {
            let mut scores = vec![0.0; n_s];
            for (cand, score) in scores.iter_mut().enumerate() {
                let table = q_j.dot(&elog.lambda.slice(s![j, .., cand]));
                let mm = sampler.hold_eval(
                    j,
                    HeldVar::S,
                    cand,
                    nu.row(j).as_slice().expect("contiguous row"),
                    &hp.levels,
                    hp.epsilon,
                );
                *score = mm.log_density(log_r, log_1mr) + table;
            }
            normalize_log(&mut scores).expect("finite scores");
            for (x, &v) in rho.row_mut(j).iter_mut().zip(&scores) {
                *x = v;
            }
        }

        let mut scores = vec![0.0; n_u];
        for (cand, score) in scores.iter_mut().enumerate() {
            let table = q_j.dot(&elog.eta.column(cand));
            let mm = sampler.hold_eval(
                j,
                HeldVar::U,
                cand,
                rho.row(j).as_slice().expect("contiguous row"),
                &hp.levels,
                hp.epsilon,
            );
            *score = mm.log_density(log_r, log_1mr) + table;
        }
        normalize_log(&mut scores).expect("finite scores");
        for (x, &v) in nu.row_mut(j).iter_mut().zip(&scores) {
            *x = v;
        }

        sampler.resample(
            j,
            rho.row(j).as_slice().expect("contiguous row"),
            nu.row(j).as_slice().expect("contiguous row"),
            &hp.levels,
            rng,
        );
    }
}

/// Document stick update from the word-table weights.
pub fn update_beta_doc(phi: ArrayView2<Real>, t: usize, beta: Real) -> Array2<Real> {
    let counts = phi.sum_axis(Axis(0)); // mass per table
    let mut out = Array2::zeros((t, 2));
    let mut tail = 0.0;
    for tt in (0..t).rev() {
        out[[tt, 0]] = 1.0 + counts[tt];
        out[[tt, 1]] = beta + tail;
        tail += counts[tt];
    }
    out
}

/// Corpus stick update from all table-topic weights.
pub fn update_alpha(states: &[DocState], hp: &Hyperparams) -> Array2<Real> {
    let mut counts = vec![0.0; hp.k];
    for st in states {
        for row in st.xi_t.rows() {
            for (c, &x) in counts.iter_mut().zip(row) {
                *c += x;
            }
        }
    }
    let mut out = Array2::zeros((hp.k, 2));
    let mut tail = 0.0;
    for k in (0..hp.k).rev() {
        out[[k, 0]] = 1.0 + counts[k];
        out[[k, 1]] = hp.alpha + tail;
        tail += counts[k];
    }
    out
}

/// Per-word topic weights for one document: q[j, k] = sum_t phi[j,t] xi[t,k].
fn topic_weights(st: &DocState) -> Array2<Real> {
    st.phi_t.dot(&st.xi_t)
}

/// Topic-word Dirichlet update.
pub fn update_theta(corpus: &Corpus, states: &[DocState], hp: &Hyperparams) -> Array2<Real> {
    let mut theta_t = Array2::from_elem((hp.k, corpus.vocab.len()), hp.theta);
    for (r, st) in corpus.reviews.iter().zip(states) {
        let q = topic_weights(st);
        for (j, &w) in r.tokens.iter().enumerate() {
            for k in 0..hp.k {
                theta_t[[k, w]] += q[[j, k]];
            }
        }
    }
    theta_t
}

/// Word-sentiment Dirichlet update.
pub fn update_lambda(corpus: &Corpus, states: &[DocState], hp: &Hyperparams) -> Array3<Real> {
    let n_s = hp.levels.n_s();
    let mut lambda_t =
        Array3::from_shape_fn((hp.k, corpus.vocab.len(), n_s), |(_, _, ss)| hp.lambda[ss]);
    for (r, st) in corpus.reviews.iter().zip(states) {
        let q = topic_weights(st);
        for (j, &w) in r.tokens.iter().enumerate() {
            for k in 0..hp.k {
                let q_jk = q[[j, k]];
                for ss in 0..n_s {
                    lambda_t[[k, w, ss]] += q_jk * st.rho_t[[j, ss]];
                }
            }
        }
    }
    lambda_t
}

/// User-preference Dirichlet update.
pub fn update_eta(corpus: &Corpus, states: &[DocState], hp: &Hyperparams) -> Array3<Real> {
    let n_u = hp.levels.n_u();
    let mut eta_t =
        Array3::from_shape_fn((hp.k, corpus.users.len(), n_u), |(_, _, uu)| hp.eta[uu]);
    for (r, st) in corpus.reviews.iter().zip(states) {
        let q = topic_weights(st);
        for j in 0..r.tokens.len() {
            for k in 0..hp.k {
                let q_jk = q[[j, k]];
                for uu in 0..n_u {
                    eta_t[[k, r.author, uu]] += q_jk * st.nu_t[[j, uu]];
                }
            }
        }
    }
    eta_t
}

/// All four global updates in one pass over the corpus, sharing the per-word
/// topic weights; agrees with the individual update operations exactly
/// because the accumulation order per document is the same.
pub fn accumulate_globals(
    corpus: &Corpus,
    states: &[DocState],
    hp: &Hyperparams,
) -> GlobalState {
    accumulate_weighted(
        corpus.reviews.iter().zip(states),
        corpus.vocab.len(),
        corpus.users.len(),
        1.0,
        hp,
    )
}

/// The accumulation behind [`accumulate_globals`] over an explicit document
/// set, with every per-document contribution multiplied by `weight` and
/// priors counted once.  Weight 1 reproduces the batch update bit for bit
/// (multiplying by 1.0 is exact).
pub(crate) fn accumulate_weighted<'a>(
    docs: impl Iterator<Item = (&'a Review, &'a DocState)>,
    v: usize,
    c: usize,
    weight: Real,
    hp: &Hyperparams,
) -> GlobalState {
    let (n_s, n_u) = (hp.levels.n_s(), hp.levels.n_u());
    let mut theta_t = Array2::from_elem((hp.k, v), hp.theta);
    let mut lambda_t = Array3::from_shape_fn((hp.k, v, n_s), |(_, _, ss)| hp.lambda[ss]);
    let mut eta_t = Array3::from_shape_fn((hp.k, c, n_u), |(_, _, uu)| hp.eta[uu]);
    let mut xi_counts = vec![0.0; hp.k];
    for (r, st) in docs {
        let q = topic_weights(st);
        for (j, &w) in r.tokens.iter().enumerate() {
            for k in 0..hp.k {
                let q_jk = weight * q[[j, k]];
                theta_t[[k, w]] += q_jk;
                for ss in 0..n_s {
                    lambda_t[[k, w, ss]] += q_jk * st.rho_t[[j, ss]];
                }
                for uu in 0..n_u {
                    eta_t[[k, r.author, uu]] += q_jk * st.nu_t[[j, uu]];
                }
            }
        }
        for row in st.xi_t.rows() {
            for (cnt, &x) in xi_counts.iter_mut().zip(row) {
                *cnt += weight * x;
            }
        }
    }
    let mut alpha_t = Array2::zeros((hp.k, 2));
    let mut tail = 0.0;
    for k in (0..hp.k).rev() {
        alpha_t[[k, 0]] = 1.0 + xi_counts[k];
        alpha_t[[k, 1]] = hp.alpha + tail;
        tail += xi_counts[k];
    }
    GlobalState { alpha_t, theta_t, lambda_t, eta_t }
}

/// One local coordinate sweep of a document against frozen globals:
/// tables, then word tables, then word sentiment/preference, then the
/// document sticks.
pub fn sweep_doc(
    review: &Review,
    elog: &DocElog,
    elog_pi: &[Real],
    st: &mut DocState,
    hp: &Hyperparams,
    rng: &mut impl Rng,
) {
    let w = elog.mix(st.rho_t.view(), st.nu_t.view());
    st.xi_t = update_xi(st.phi_t.view(), w.view(), elog_pi);
    st.phi_t = update_phi(st.xi_t.view(), w.view(), st.beta_t.view());
    update_rho_nu(
        review.norm_rating,
        elog,
        st.xi_t.view(),
        st.phi_t.view(),
        &mut st.rho_t,
        &mut st.nu_t,
        hp,
        rng,
    );
    st.beta_t = update_beta_doc(st.phi_t.view(), hp.t, hp.beta);
}

/// Runs [`sweep_doc`] over every document in parallel. Each document uses
/// an RNG stream keyed by (seed, iteration, doc id), so scheduling cannot
/// change results.
pub fn sweep_docs(
    corpus: &Corpus,
    globals: &GlobalState,
    states: &mut [DocState],
    hp: &Hyperparams,
    seed: u64,
    iteration: u64,
) {
    let tables = ElogTables::from_globals(globals);
    let elog_pi = elog_sticks(globals.alpha_t.view());
    corpus
        .reviews
        .par_iter()
        .zip(states.par_iter_mut())
        .for_each(|(review, st)| {
            let elog = DocElog::from_tables(&tables, &review.tokens, review.author);
            let mut rng = seeds::stream(seed, seeds::TAG_SWEEP, iteration, review.doc_id as u64);
            sweep_doc(review, &elog, &elog_pi, st, hp, &mut rng);
        });
}

/// When batch training stops: a hard iteration cap, the training error
/// settling (relative change below `tol` across a trailing `window` of
/// iterations), or a wall-clock budget.
#[derive(Debug, Clone)]
pub struct StopRule {
    pub max_iters: usize,
    pub tol: Real,
    pub window: usize,
    pub wall_limit: Option<std::time::Duration>,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-4, window: 3, wall_limit: None }
    }
}

/// One training iteration's progress line.
#[derive(Debug, Clone)]
pub struct IterDiag {
    pub iteration: usize,
    pub mae: Real,
    /// Seconds since training started, measured at the end of the iteration.
    pub seconds: Real,
}

/// True once the error has settled: the endpoints of the trailing window
/// differ by less than `tol` in relative terms.
pub(crate) fn error_settled(diags: &[IterDiag], stop: &StopRule) -> bool {
    if stop.window == 0 || diags.len() <= stop.window {
        return false;
    }
    let base = diags[diags.len() - 1 - stop.window].mae;
    let last = diags[diags.len() - 1].mae;
    (base - last).abs() / base.max(1e-12) < stop.tol
}

/// Training-side regression error of the current local fits: each document's
/// rating posterior is refit from its rho/nu rows and the beta mean is
/// denormalized against the raw rating.  This reads the states in hand and
/// skips the held-out fixed point, so it is cheap enough to run every
/// iteration.
pub fn states_mae(
    corpus: &Corpus,
    states: &[DocState],
    hp: &Hyperparams,
    seed: u64,
    iteration: u64,
) -> Real {
    let span = (corpus.scale.1 - corpus.scale.0) as Real;
    let total: Real = corpus
        .reviews
        .par_iter()
        .zip(states.par_iter())
        .map(|(r, st)| {
            let mut rng = seeds::stream(seed, seeds::TAG_PREDICT, iteration, r.doc_id as u64);
            let r_t = crate::predict::update_r(st, hp, &mut rng);
            let predicted = corpus.scale.0 as Real + r_t.0 / (r_t.0 + r_t.1) * span;
            (predicted - r.raw_rating as Real).abs()
        })
        .sum();
    total / corpus.n_docs() as Real
}

/// Full-corpus coordinate ascent: local sweeps over every document, then the
/// global tables, repeated until the stop rule fires.
pub fn train_batch(
    corpus: &Corpus,
    hp: &Hyperparams,
    stop: &StopRule,
    seed: u64,
) -> Result<(GlobalState, Vec<IterDiag>), InferenceError> {
    let started = std::time::Instant::now();
    let (mut globals, mut states) = init_state(corpus, hp, seed, DEFAULT_PERTURB)?;
    let mut diags = Vec::new();
    for iteration in 0..stop.max_iters {
        sweep_docs(corpus, &globals, &mut states, hp, seed, iteration as u64);
        globals = accumulate_globals(corpus, &states, hp);
        let mae = states_mae(corpus, &states, hp, seed, iteration as u64);
        diags.push(IterDiag { iteration, mae, seconds: started.elapsed().as_secs_f64() });
        if error_settled(&diags, stop) {
            break;
        }
        if stop.wall_limit.is_some_and(|limit| started.elapsed() >= limit) {
            break;
        }
    }
    Ok((globals, diags))
}

/// Regression error of frozen globals on a corpus, through the full
/// prediction pipeline.
pub fn training_error(
    globals: &GlobalState,
    corpus: &Corpus,
    hp: &Hyperparams,
    cfg: &crate::predict::PredictConfig,
) -> Result<Real, InferenceError> {
    if corpus.n_docs() == 0 {
        return Err(InferenceError::EmptyCorpus);
    }
    let rows = crate::predict::predict_corpus(corpus, globals, hp, cfg, None)
        .expect("corpus documents are never empty");
    Ok(crate::predict::mae(&rows))
}
