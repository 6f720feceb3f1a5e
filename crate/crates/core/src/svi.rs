//! Stochastic and online training: single-document steps and time-ordered
//! batch folds, both built from the batch updates plus a forgetting-rate
//! merge of old and intermediate global states.

use std::time::{Duration, Instant};

use ndarray::s;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::analytics;
use crate::corpus::{Corpus, Registry, Review};
use crate::inference::{
    accumulate_weighted, elog_sticks, init_doc, init_globals, sweep_doc, train_batch, DocElog,
    DocState, ElogTables, GlobalState, Hyperparams, InferenceError, StopRule, DEFAULT_PERTURB,
};
use crate::predict::{self, PredictError};
use crate::seeds;
use crate::Real;

#[derive(Debug, Error)]
pub enum SviError {
    #[error("corpus has no reviews")]
    EmptyCorpus,
    #[error("parameter shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("budget needs a step cap or a wall-clock limit")]
    UnboundedBudget,
    #[error("holding out {0} probe documents leaves no training data ({1} available)")]
    ProbeTooLarge(usize, usize),
    #[error("batch {index} does not extend the model registries: {what}")]
    RegistryMismatch { index: usize, what: String },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// How much weight a merge gives the intermediate state at step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForgettingSchedule {
    /// 1/(t+1) on the 1-based step counter; the single-document default.
    InverseT,
    /// Batch size over base size; the online default.
    FixedRatio,
    /// One fixed rate for every step.
    Constant(Real),
}

impl ForgettingSchedule {
    /// The rate for step `t`, clamped into (0, 1].
    pub fn rate(&self, t: usize, batch: usize, base: usize) -> Real {
        let r = match *self {
            Self::InverseT => 1.0 / (t as Real + 1.0),
            Self::FixedRatio => batch as Real / base.max(1) as Real,
            Self::Constant(v) => v,
        };
        r.clamp(Real::MIN_POSITIVE, 1.0)
    }
}

/// Global updates over an explicit document set with every per-document
/// contribution multiplied by `scale` and priors counted once, so a few
/// documents can stand in for a corpus of `scale` times their size.  Scale 1
/// over the whole corpus reproduces the batch accumulation exactly.
pub fn intermediate_globals<'a>(
    docs: impl IntoIterator<Item = (&'a Review, &'a DocState)>,
    v: usize,
    c: usize,
    scale: Real,
    hp: &Hyperparams,
) -> GlobalState {
    debug_assert!(scale > 0.0);
    accumulate_weighted(docs.into_iter(), v, c, scale, hp)
}

fn check_shape(name: &str, a: &[usize], b: &[usize]) -> Result<(), SviError> {
    if a != b {
        return Err(SviError::ShapeMismatch(format!("{name} {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Componentwise convex combination of two global states; `r_t` = 0 keeps
/// `old` exactly and 1 adopts `intermediate` exactly.
pub fn merge(
    old: &GlobalState,
    intermediate: &GlobalState,
    r_t: Real,
) -> Result<GlobalState, SviError> {
    debug_assert!((0.0..=1.0).contains(&r_t));
    check_shape("alpha", old.alpha_t.shape(), intermediate.alpha_t.shape())?;
    check_shape("theta", old.theta_t.shape(), intermediate.theta_t.shape())?;
    check_shape("lambda", old.lambda_t.shape(), intermediate.lambda_t.shape())?;
    check_shape("eta", old.eta_t.shape(), intermediate.eta_t.shape())?;
    if r_t == 0.0 {
        return Ok(old.clone());
    }
    if r_t == 1.0 {
        return Ok(intermediate.clone());
    }
    let keep = 1.0 - r_t;
    Ok(GlobalState {
        alpha_t: &old.alpha_t * keep + &intermediate.alpha_t * r_t,
        theta_t: &old.theta_t * keep + &intermediate.theta_t * r_t,
        lambda_t: &old.lambda_t * keep + &intermediate.lambda_t * r_t,
        eta_t: &old.eta_t * keep + &intermediate.eta_t * r_t,
    })
}

/// Stops a step loop on whichever bound is hit first; at least one bound
/// must be set.
#[derive(Debug, Clone, Default)]
pub struct Budget {
    pub max_steps: Option<usize>,
    pub wall_limit: Option<Duration>,
}

impl Budget {
    pub fn steps(n: usize) -> Self {
        Self { max_steps: Some(n), wall_limit: None }
    }

    fn validate(&self) -> Result<(), SviError> {
        if self.max_steps.is_none() && self.wall_limit.is_none() {
            return Err(SviError::UnboundedBudget);
        }
        Ok(())
    }

    fn exhausted(&self, steps_done: usize, started: Instant) -> bool {
        self.max_steps.is_some_and(|m| steps_done >= m)
            || self.wall_limit.is_some_and(|w| started.elapsed() >= w)
    }
}

/// Inner-loop convergence rule for one document's local updates.
#[derive(Debug, Clone)]
pub struct LocalRule {
    pub max_rounds: usize,
    /// Largest entry change of the topic-mixture rows that still counts as
    /// settled (the rows sum to one, so this is a relative measure).
    pub tol: Real,
}

impl Default for LocalRule {
    fn default() -> Self {
        Self { max_rounds: 20, tol: 1e-4 }
    }
}

/// Iterates one document's local updates against frozen tables until the
/// xi/phi rows settle or the round cap is hit.
pub fn local_converge(
    review: &Review,
    tables: &ElogTables,
    elog_pi: &[Real],
    hp: &Hyperparams,
    rule: &LocalRule,
    rng: &mut impl Rng,
) -> DocState {
    let elog = DocElog::from_tables(tables, &review.tokens, review.author);
    let mut st = init_doc(&elog, hp);
    for _ in 0..rule.max_rounds.max(1) {
        let prev_xi = st.xi_t.clone();
        let prev_phi = st.phi_t.clone();
        sweep_doc(review, &elog, elog_pi, &mut st, hp, rng);
        let delta = (&st.xi_t - &prev_xi)
            .iter()
            .chain((&st.phi_t - &prev_phi).iter())
            .fold(0.0 as Real, |m, &d| m.max(d.abs()));
        if delta < rule.tol {
            break;
        }
    }
    st
}

/// Knobs for [`train_stochastic`] beyond the corpus and priors.
#[derive(Debug, Clone)]
pub struct StochasticConfig {
    pub budget: Budget,
    pub schedule: ForgettingSchedule,
    /// Draw documents independently instead of shuffling each epoch.
    pub with_replacement: bool,
    /// Steps between held-out MAE probes; 0 disables probing.
    pub probe_every: usize,
    /// Documents held out of training to form the probe set.
    pub probe_docs: usize,
    pub local: LocalRule,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        Self {
            budget: Budget::steps(1000),
            schedule: ForgettingSchedule::InverseT,
            with_replacement: false,
            probe_every: 0,
            probe_docs: 0,
            local: LocalRule::default(),
        }
    }
}

/// One stochastic step's progress line.
#[derive(Debug, Clone)]
pub struct StepDiag {
    pub step: usize,
    pub rate: Real,
    /// Probe MAE when this step hit the probe cadence.
    pub mae: Option<Real>,
    /// Seconds since training started, measured at the end of the step.
    pub seconds: Real,
}

fn subset_corpus(corpus: &Corpus, ids: &[usize]) -> Corpus {
    Corpus {
        reviews: ids.iter().map(|&i| corpus.reviews[i].clone()).collect(),
        vocab: corpus.vocab.clone(),
        users: corpus.users.clone(),
        scale: corpus.scale,
        epsilon: corpus.epsilon,
    }
}

/// Single-document training: sample one review, fit its local parameters
/// against the current globals, scale its contribution up to the corpus
/// size, and merge with the forgetting rate.
pub fn train_stochastic(
    corpus: &Corpus,
    hp: &Hyperparams,
    cfg: &StochasticConfig,
    seed: u64,
) -> Result<(GlobalState, Vec<StepDiag>), SviError> {
    if corpus.reviews.is_empty() {
        return Err(SviError::EmptyCorpus);
    }
    cfg.budget.validate()?;
    let d_total = corpus.reviews.len();
    if cfg.probe_docs >= d_total && cfg.probe_docs > 0 {
        return Err(SviError::ProbeTooLarge(cfg.probe_docs, d_total));
    }

    // One sequential picker stream drives the probe split and every later
    // document draw, so the trajectory is a function of the seed alone.
    let mut picker = seeds::stream(seed, seeds::TAG_PICK, 0, 0);
    let mut ids: Vec<usize> = (0..d_total).collect();
    let probe_corpus = if cfg.probe_docs > 0 {
        ids.shuffle(&mut picker);
        let probe = subset_corpus(corpus, &ids[..cfg.probe_docs]);
        ids = ids[cfg.probe_docs..].to_vec();
        ids.sort_unstable();
        Some(probe)
    } else {
        None
    };
    let pool = ids;
    let scale_d = pool.len() as Real;

    let (v, c) = (corpus.vocab.len(), corpus.users.len());
    let mut globals = init_globals(v, c, hp, seed, DEFAULT_PERTURB);
    let mut diags = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let started = Instant::now();
    let mut t = 0usize;
    while !cfg.budget.exhausted(t, started) {
        t += 1;
        let doc = if cfg.with_replacement {
            pool[picker.random_range(0..pool.len())]
        } else {
            if order.is_empty() {
                order = pool.clone();
                order.shuffle(&mut picker);
            }
            order.pop().expect("nonempty epoch order")
        };
        let review = &corpus.reviews[doc];
        let tables = ElogTables::from_globals(&globals);
        let elog_pi = elog_sticks(globals.alpha_t.view());
        let mut rng = seeds::stream(seed, seeds::TAG_SWEEP, t as u64, review.doc_id as u64);
        let st = local_converge(review, &tables, &elog_pi, hp, &cfg.local, &mut rng);
        let intermediate = intermediate_globals([(review, &st)], v, c, scale_d, hp);
        let r_t = cfg.schedule.rate(t, 1, pool.len());
        globals = merge(&globals, &intermediate, r_t)?;

        let mut mae = None;
        if cfg.probe_every > 0 && t % cfg.probe_every == 0 {
            if let Some(pc) = &probe_corpus {
                let pcfg = predict::PredictConfig { seed, ..Default::default() };
                let rows = predict::predict_corpus(pc, &globals, hp, &pcfg, None)?;
                mae = Some(predict::mae(&rows));
            }
        }
        diags.push(StepDiag { step: t, rate: r_t, mae, seconds: started.elapsed().as_secs_f64() });
    }
    Ok((globals, diags))
}

/// One per-topic reading of the model at a point in stream time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendSnapshot {
    pub step: usize,
    pub end_time: i64,
    pub topic: usize,
    pub sentiment: Real,
    pub preference: Real,
    pub concentration: Real,
}

/// Per-topic sentiment/preference/concentration after the base fit (step 0)
/// and after every folded batch, keyed by the batch's last review time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrendSeries {
    pub snapshots: Vec<TrendSnapshot>,
    /// 1-based indices of batches skipped for being empty.
    pub skipped: Vec<usize>,
}

impl TrendSeries {
    /// Distinct snapshot steps in recorded order.
    pub fn steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for s in &self.snapshots {
            if out.last() != Some(&s.step) {
                out.push(s.step);
            }
        }
        out
    }
}

fn push_snapshots(
    series: &mut TrendSeries,
    step: usize,
    end_time: i64,
    g: &GlobalState,
    hp: &Hyperparams,
) {
    for k in 0..g.n_topics() {
        series.snapshots.push(TrendSnapshot {
            step,
            end_time,
            topic: k,
            sentiment: analytics::topic_sentiment(g.lambda_t.view(), &hp.levels, k),
            preference: analytics::topic_preference(g.eta_t.view(), &hp.levels, k),
            concentration: analytics::topic_concentration(g.theta_t.view(), k),
        });
    }
}

/// Knobs for [`train_online`].
#[derive(Debug, Clone)]
pub struct OnlineConfig {
    /// The mass a folded batch is scaled up to; 0 means the base corpus size.
    pub base_size: usize,
    /// Cap on self-consistency rounds per batch (the batch size caps it too).
    pub batch_cap: usize,
    pub schedule: ForgettingSchedule,
    /// Stop rule for the initial batch-training run on the base corpus.
    pub base_stop: StopRule,
    pub local: LocalRule,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            base_size: 0,
            batch_cap: 5,
            schedule: ForgettingSchedule::FixedRatio,
            base_stop: StopRule::default(),
            local: LocalRule::default(),
        }
    }
}

fn extends(old: &Registry, new: &Registry) -> bool {
    new.len() >= old.len() && new.names()[..old.len()] == *old.names()
}

/// Widens the vocabulary and user axes with prior rows so a model trained on
/// earlier data can absorb batches whose registries grew.
pub fn grow_globals(g: &GlobalState, v: usize, c: usize, hp: &Hyperparams) -> GlobalState {
    let (k, v_old) = g.theta_t.dim();
    let c_old = g.eta_t.shape()[1];
    debug_assert!(v >= v_old && c >= c_old);
    let mut theta_t = Array2::from_elem((k, v), hp.theta);
    theta_t.slice_mut(s![.., ..v_old]).assign(&g.theta_t);
    let mut lambda_t = Array3::from_shape_fn((k, v, hp.lambda.len()), |(_, _, ss)| hp.lambda[ss]);
    lambda_t.slice_mut(s![.., ..v_old, ..]).assign(&g.lambda_t);
    let mut eta_t = Array3::from_shape_fn((k, c, hp.eta.len()), |(_, _, uu)| hp.eta[uu]);
    eta_t.slice_mut(s![.., ..c_old, ..]).assign(&g.eta_t);
    GlobalState { alpha_t: g.alpha_t.clone(), theta_t, lambda_t, eta_t }
}

fn max_rel_change(a: &GlobalState, b: &GlobalState) -> Real {
    let pairs = a
        .alpha_t
        .iter()
        .zip(b.alpha_t.iter())
        .chain(a.theta_t.iter().zip(b.theta_t.iter()))
        .chain(a.lambda_t.iter().zip(b.lambda_t.iter()))
        .chain(a.eta_t.iter().zip(b.eta_t.iter()));
    pairs.fold(0.0 as Real, |m, (&x, &y)| m.max((x - y).abs() / x.abs().max(1e-12)))
}

fn latest_time(reviews: &[Review]) -> i64 {
    reviews.iter().map(|r| r.time).max().unwrap_or(0)
}

/// Online training: batch-train a base corpus, then fold each time-ordered
/// batch in as if it were a corpus of `base_size` reviews, snapshotting the
/// per-topic trend line after every fold.
pub fn train_online(
    base: &Corpus,
    batches: &[Corpus],
    cfg: &OnlineConfig,
    hp: &Hyperparams,
    seed: u64,
) -> Result<(GlobalState, TrendSeries), SviError> {
    if base.reviews.is_empty() {
        return Err(SviError::EmptyCorpus);
    }
    let d0 = if cfg.base_size == 0 { base.reviews.len() } else { cfg.base_size };

    let (mut globals, _) = train_batch(base, hp, &cfg.base_stop, seed)?;
    let mut series = TrendSeries::default();
    push_snapshots(&mut series, 0, latest_time(&base.reviews), &globals, hp);

    let mut prev_vocab = &base.vocab;
    let mut prev_users = &base.users;
    for (i, batch) in batches.iter().enumerate() {
        let t = i + 1;
        if batch.reviews.is_empty() {
            series.skipped.push(t);
            continue;
        }
        for (name, old, new) in
            [("vocab", prev_vocab, &batch.vocab), ("users", prev_users, &batch.users)]
        {
            if !extends(old, new) {
                return Err(SviError::RegistryMismatch {
                    index: t,
                    what: format!("{name} is not an extension of the earlier registry"),
                });
            }
        }
        globals = grow_globals(&globals, batch.vocab.len(), batch.users.len(), hp);
        let (v, c) = (batch.vocab.len(), batch.users.len());
        let d_t = batch.reviews.len();
        let scale = d0 as Real / d_t as Real;
        let r_t = cfg.schedule.rate(t, d_t, d0);

        // Self-consistency rounds: refit the batch against the would-be
        // merged state until the intermediate settles, then merge once.
        let mut intermediate: Option<GlobalState> = None;
        for round in 0..cfg.batch_cap.min(d_t).max(1) {
            let candidate = match &intermediate {
                None => globals.clone(),
                Some(inter) => merge(&globals, inter, r_t)?,
            };
            let tables = ElogTables::from_globals(&candidate);
            let elog_pi = elog_sticks(candidate.alpha_t.view());
            let states: Vec<DocState> = batch
                .reviews
                .par_iter()
                .map(|review| {
                    let a = 1_000_003 * t as u64 + round as u64;
                    let mut rng = seeds::stream(seed, seeds::TAG_SWEEP, a, review.doc_id as u64);
                    local_converge(review, &tables, &elog_pi, hp, &cfg.local, &mut rng)
                })
                .collect();
            let next =
                intermediate_globals(batch.reviews.iter().zip(&states), v, c, scale, hp);
            let settled =
                intermediate.as_ref().is_some_and(|prev| max_rel_change(prev, &next) < cfg.local.tol);
            intermediate = Some(next);
            if settled {
                break;
            }
        }
        globals = merge(&globals, &intermediate.expect("at least one round"), r_t)?;
        push_snapshots(&mut series, t, latest_time(&batch.reviews), &globals, hp);
        prev_vocab = &batch.vocab;
        prev_users = &batch.users;
    }
    Ok((globals, series))
}
