//! Rating regression: the map from per-word sentiment/preference assignments
//! to Beta observation parameters, and Monte-Carlo estimators for the
//! variational expectations of those parameters.

use crate::numerics::{log_beta, RunningMoments};
use crate::Real;
use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressionError {
    #[error("sentiment levels must be non-empty, strictly increasing and within [-1, 1]")]
    BadSentimentLevels,
    #[error("preference levels must be non-empty, strictly increasing and within (0, 1]")]
    BadPreferenceLevels,
}

/// Discrete level sets for word sentiment (subset of [-1, 1]) and user
/// preference (subset of (0, 1]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Levels {
    pub sentiment: Vec<Real>,
    pub preference: Vec<Real>,
}

impl Default for Levels {
    fn default() -> Self {
        Self { sentiment: vec![-1.0, 0.0, 1.0], preference: vec![0.5, 1.0] }
    }
}

impl Levels {
    pub fn new(sentiment: Vec<Real>, preference: Vec<Real>) -> Result<Self, RegressionError> {
        let lv = Self { sentiment, preference };
        lv.validate()?;
        Ok(lv)
    }

    pub fn validate(&self) -> Result<(), RegressionError> {
        let incr = |xs: &[Real]| xs.windows(2).all(|w| w[0] < w[1]);
        if self.sentiment.is_empty()
            || !incr(&self.sentiment)
            || !self.sentiment.iter().all(|s| (-1.0..=1.0).contains(s))
        {
            return Err(RegressionError::BadSentimentLevels);
        }
        if self.preference.is_empty()
            || !incr(&self.preference)
            || !self.preference.iter().all(|u| *u > 0.0 && *u <= 1.0)
        {
            return Err(RegressionError::BadPreferenceLevels);
        }
        Ok(())
    }

    pub fn n_s(&self) -> usize {
        self.sentiment.len()
    }

    pub fn n_u(&self) -> usize {
        self.preference.len()
    }

    /// Index of the sentiment level nearest to `value`; ties go to the lower
    /// level.
    pub fn nearest_s(&self, value: Real) -> usize {
        let mut best = 0;
        let mut best_d = (self.sentiment[0] - value).abs();
        for (i, &s) in self.sentiment.iter().enumerate().skip(1) {
            let d = (s - value).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// Rating of a single word: preference-scaled sentiment mapped onto [0, 1].
#[inline]
pub fn word_rating(s: Real, u: Real) -> Real {
    (1.0 + u * s) / 2.0
}

/// ln clamped away from zero so extreme normalized ratings stay finite.
#[inline]
pub fn safe_ln(x: Real, eps: Real) -> Real {
    x.max(eps).ln()
}

/// Beta observation parameters for one document.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HParams {
    pub h1: Real,
    pub h2: Real,
}

impl HParams {
    /// Mean of the matched Beta distribution, h1/(h1+h2).
    pub fn mean(&self) -> Real {
        self.h1 / (self.h1 + self.h2)
    }
}

// Lower cap for the common factor c; any positive floor inside (0, -ln eps]
// works, this one keeps the h components positive for every clamped mean.
const C_FLOOR: Real = 1e-12;

/// Upper cap -ln(eps) on h1 + h2.
#[inline]
pub fn h_cap(eps: Real) -> Real {
    -eps.ln()
}

/// Moment-matched Beta parameters for a set of word ratings.
///
/// The mean is clamped into [eps, 1-eps], the common factor
/// c = mu(1-mu)/v - 1 uses the population variance and is capped into
/// (0, -ln eps]; zero variance engages the upper cap.
pub fn h_params(ratings: &[Real], eps: Real) -> HParams {
    h_from_moments(&RunningMoments::from_values(ratings), eps)
}

/// Same as [`h_params`], starting from precomputed moments.
pub fn h_from_moments(moments: &RunningMoments<Real>, eps: Real) -> HParams {
    let cap = h_cap(eps);
    let mu = moments.mean().clamp(eps, 1.0 - eps);
    let v = moments.variance();
    let c = if v > 0.0 { mu * (1.0 - mu) / v - 1.0 } else { Real::INFINITY };
    let c = c.clamp(C_FLOOR, cap);
    // When eps is below the float resolution at 1, the clamped mean can land
    // exactly on 1; keep both components strictly positive regardless.
    let mut h1 = mu.max(eps) * c;
    let mut h2 = (1.0 - mu).max(eps) * c;
    let sum = h1 + h2;
    if sum > cap {
        let k = cap / sum;
        h1 *= k;
        h2 *= k;
    }
    HParams { h1, h2 }
}

/// Monte-Carlo estimates of the Beta-parameter expectations for one document.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMoments {
    pub e_h1: Real,
    pub e_h2: Real,
    pub e_log_b: Real,
}

impl McMoments {
    /// Expected log of the rating density given multipliers for log r and
    /// log(1-r): log_r·E[h1] + log_1mr·E[h2] − E[ln B(h1, h2)].
    pub fn log_density(&self, log_r: Real, log_1mr: Real) -> Real {
        log_r * self.e_h1 + log_1mr * self.e_h2 - self.e_log_b
    }
}

/// Which variable of a word position is held at a candidate level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeldVar {
    S,
    U,
}

pub(crate) fn sample_cat(rng: &mut impl Rng, probs: &[Real]) -> usize {
    let u: Real = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Persistent joint samples of every word's (sentiment, preference) levels,
/// with per-sample rating moments kept incrementally.
///
/// Candidate levels for one word are scored by swapping just that word's
/// rating inside each sample, so switching candidates costs O(1) per sample.
/// The held word's partner variable is enumerated under its categorical
/// rather than sampled, which makes single-word documents exact with zero
/// variance across seeds.
pub struct DocSampler {
    m: usize,
    n: usize,
    ratings: Vec<Real>,
    moments: Vec<RunningMoments<Real>>,
}

impl DocSampler {
    /// Draws `m` joint samples of all word assignments from the given
    /// categorical rows.
    pub fn new(
        rho: ArrayView2<Real>,
        nu: ArrayView2<Real>,
        levels: &Levels,
        m: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = rho.nrows();
        debug_assert_eq!(n, nu.nrows());
        let mut ratings = vec![0.0; m * n];
        let mut moments = vec![RunningMoments::default(); m];
        for i in 0..m {
            for j in 0..n {
                let si = sample_cat(rng, rho.row(j).as_slice().expect("contiguous row"));
                let ui = sample_cat(rng, nu.row(j).as_slice().expect("contiguous row"));
                let r = word_rating(levels.sentiment[si], levels.preference[ui]);
                ratings[i * n + j] = r;
                moments[i].push(r);
            }
        }
        Self { m, n, ratings, moments }
    }

    /// E[h1], E[h2], E[ln B] with word `j`'s held variable fixed at candidate
    /// level `cand` and its partner variable enumerated under
    /// `partner_probs`.
    pub fn hold_eval(
        &self,
        j: usize,
        held: HeldVar,
        cand: usize,
        partner_probs: &[Real],
        levels: &Levels,
        eps: Real,
    ) -> McMoments {
        debug_assert!(j < self.n);
        let mut e_h1 = 0.0;
        let mut e_h2 = 0.0;
        let mut e_log_b = 0.0;
        for i in 0..self.m {
            let old = self.ratings[i * self.n + j];
            for (pi, &w) in partner_probs.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let new = match held {
                    HeldVar::S => word_rating(levels.sentiment[cand], levels.preference[pi]),
                    HeldVar::U => word_rating(levels.sentiment[pi], levels.preference[cand]),
                };
                let mut mo = self.moments[i];
                mo.swap(old, new);
                let h = h_from_moments(&mo, eps);
                let lb = log_beta(h.h1, h.h2).expect("h components positive");
                e_h1 += w * h.h1;
                e_h2 += w * h.h2;
                e_log_b += w * lb;
            }
        }
        let inv = 1.0 / self.m as Real;
        McMoments { e_h1: e_h1 * inv, e_h2: e_h2 * inv, e_log_b: e_log_b * inv }
    }

    /// E[h1], E[h2], E[ln B] under the joint samples with nothing held.
    pub fn plain_eval(&self, eps: Real) -> McMoments {
        let mut e_h1 = 0.0;
        let mut e_h2 = 0.0;
        let mut e_log_b = 0.0;
        for mo in &self.moments {
            let h = h_from_moments(mo, eps);
            e_h1 += h.h1;
            e_h2 += h.h2;
            e_log_b += log_beta(h.h1, h.h2).expect("h components positive");
        }
        let inv = 1.0 / self.m as Real;
        McMoments { e_h1: e_h1 * inv, e_h2: e_h2 * inv, e_log_b: e_log_b * inv }
    }

    /// Redraws word `j` in every sample from fresh categorical rows, keeping
    /// the per-sample moments in sync.
    pub fn resample(
        &mut self,
        j: usize,
        rho_j: &[Real],
        nu_j: &[Real],
        levels: &Levels,
        rng: &mut impl Rng,
    ) {
        for i in 0..self.m {
            let si = sample_cat(rng, rho_j);
            let ui = sample_cat(rng, nu_j);
            let new = word_rating(levels.sentiment[si], levels.preference[ui]);
            let at = i * self.n + j;
            let old = self.ratings[at];
            self.moments[i].swap(old, new);
            self.ratings[at] = new;
        }
    }
}

/// One-shot Monte-Carlo estimate of (E[h1], E[h2], E[ln B]) for a document
/// given its assignment rows; see [`DocSampler`] for the estimator semantics.
pub fn mc_expectations(
    rho: ArrayView2<Real>,
    nu: ArrayView2<Real>,
    hold: Option<(usize, HeldVar, usize)>,
    levels: &Levels,
    m: usize,
    eps: Real,
    rng: &mut impl Rng,
) -> McMoments {
    // A lone word leaves nothing to sample: enumerate its level pairs.
    if hold.is_none() && rho.nrows() == 1 {
        let mut out = McMoments { e_h1: 0.0, e_h2: 0.0, e_log_b: 0.0 };
        for (si, &s) in levels.sentiment.iter().enumerate() {
            for (ui, &u) in levels.preference.iter().enumerate() {
                let w = rho[[0, si]] * nu[[0, ui]];
                if w == 0.0 {
                    continue;
                }
                let h = h_params(&[word_rating(s, u)], eps);
                out.e_h1 += w * h.h1;
                out.e_h2 += w * h.h2;
                out.e_log_b += w * log_beta(h.h1, h.h2).expect("h components positive");
            }
        }
        return out;
    }
    let sampler = DocSampler::new(rho, nu, levels, m, rng);
    match hold {
        None => sampler.plain_eval(eps),
        Some((j, held, cand)) => {
            let partner: Vec<Real> = match held {
                HeldVar::S => nu.row(j).to_vec(),
                HeldVar::U => rho.row(j).to_vec(),
            };
            sampler.hold_eval(j, held, cand, &partner, levels, eps)
        }
    }
}
