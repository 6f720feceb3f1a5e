//! Scalar special functions and simplex helpers shared by the trainers.
//!
//! The kernels are generic over the float width via `num-traits` so they can
//! be instantiated at `f32` where that is useful; the model layers run them at
//! [`crate::Real`].

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Domain violations in the scalar kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("digamma is undefined for non-positive x (got {0})")]
    DigammaDomain(f64),
    #[error("ln_gamma is undefined for non-positive x (got {0})")]
    LnGammaDomain(f64),
    #[error("log_beta requires positive arguments (got {0}, {1})")]
    LogBetaDomain(f64, f64),
    #[error("normalize_log needs at least one finite score")]
    NoFiniteScore,
    #[error("scores must not contain NaN")]
    NanScore,
    #[error("dirichlet parameters must be positive (got {0})")]
    DirichletDomain(f64),
    #[error("stick fractions must lie in [0, 1] (got {0})")]
    StickDomain(f64),
}

/// Bound satisfied by any float width the kernels support.
pub trait Scalar: Float + FromPrimitive {}
impl<T: Float + FromPrimitive> Scalar for T {}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("kernel constant representable at this width")
}

fn lossy<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Digamma via upward recurrence onto the asymptotic regime.
///
/// Arguments below 6 are shifted up with Ψ(x) = Ψ(x+1) − 1/x and the shifted
/// value is finished with the Bernoulli tail through the x⁻¹² term, which
/// keeps the truncation error near 1e-12 at the shift boundary.
pub fn digamma<T: Scalar>(x: T) -> Result<T, NumericsError> {
    if !(x > T::zero()) || !x.is_finite() {
        return Err(NumericsError::DigammaDomain(lossy(x)));
    }
    let lim = c::<T>(6.0);
    let mut x = x;
    let mut acc = T::zero();
    while x < lim {
        acc = acc - x.recip();
        x = x + T::one();
    }
    let inv = x.recip();
    let y = inv * inv;
    let tail = y * (c::<T>(1.0 / 12.0)
        - y * (c::<T>(1.0 / 120.0)
            - y * (c::<T>(1.0 / 252.0)
                - y * (c::<T>(1.0 / 240.0)
                    - y * (c::<T>(1.0 / 132.0) - y * c::<T>(691.0 / 32760.0))))));
    Ok(acc + x.ln() - inv * c::<T>(0.5) - tail)
}

/// Natural log of the gamma function, same shift-then-series scheme as
/// [`digamma`] with the Stirling tail through the x⁻⁹ term.
pub fn ln_gamma<T: Scalar>(x: T) -> Result<T, NumericsError> {
    if !(x > T::zero()) || !x.is_finite() {
        return Err(NumericsError::LnGammaDomain(lossy(x)));
    }
    let lim = c::<T>(10.0);
    let mut x = x;
    let mut shift = T::zero();
    while x < lim {
        shift = shift + x.ln();
        x = x + T::one();
    }
    let inv = x.recip();
    let y = inv * inv;
    let tail = inv
        * (c::<T>(1.0 / 12.0)
            - y * (c::<T>(1.0 / 360.0)
                - y * (c::<T>(1.0 / 1260.0)
                    - y * (c::<T>(1.0 / 1680.0) - y * c::<T>(1.0 / 1188.0)))));
    let half_ln_2pi = c::<T>(0.918_938_533_204_672_8);
    Ok((x - c::<T>(0.5)) * x.ln() - x + half_ln_2pi + tail - shift)
}

/// ln B(a, b) = lnΓ(a) + lnΓ(b) − lnΓ(a+b).
pub fn log_beta<T: Scalar>(a: T, b: T) -> Result<T, NumericsError> {
    if !(a > T::zero()) || !(b > T::zero()) {
        return Err(NumericsError::LogBetaDomain(lossy(a), lossy(b)));
    }
    Ok(ln_gamma(a)? + ln_gamma(b)? - ln_gamma(a + b)?)
}

/// Exponentiates log scores into a probability row, shifting by the maximum
/// first.  `-inf` entries map to exact zeros; an empty slice or a row with no
/// finite entry is an error.
pub fn normalize_log<T: Scalar>(scores: &mut [T]) -> Result<(), NumericsError> {
    let mut max = T::neg_infinity();
    for &s in scores.iter() {
        if s.is_nan() {
            return Err(NumericsError::NanScore);
        }
        if s > max {
            max = s;
        }
    }
    if !max.is_finite() {
        return Err(NumericsError::NoFiniteScore);
    }
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum = sum + *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
    Ok(())
}

/// E[log x_i] under Dirichlet(params): Ψ(params_i) − Ψ(Σ params).
pub fn expected_log_dirichlet<T: Scalar>(params: &[T]) -> Result<Vec<T>, NumericsError> {
    let mut sum = T::zero();
    for &p in params {
        if !(p > T::zero()) {
            return Err(NumericsError::DirichletDomain(lossy(p)));
        }
        sum = sum + p;
    }
    if params.is_empty() {
        return Err(NumericsError::DirichletDomain(f64::NAN));
    }
    let dg_sum = digamma(sum)?;
    params.iter().map(|&p| Ok(digamma(p)? - dg_sum)).collect()
}

/// (E[log x], E[log(1−x)]) under Beta(a, b).
pub fn expected_log_beta<T: Scalar>(a: T, b: T) -> Result<(T, T), NumericsError> {
    if !(a > T::zero()) || !(b > T::zero()) {
        return Err(NumericsError::LogBetaDomain(lossy(a), lossy(b)));
    }
    let dg_sum = digamma(a + b)?;
    Ok((digamma(a)? - dg_sum, digamma(b)? - dg_sum))
}

/// Stick-breaking map: fractions b₁..b_{K−1} to K weights.  The final weight
/// absorbs whatever mass the fractions left unbroken, and the emitted weights
/// are capped so the sequential sum is exactly 1.
pub fn stick_weights<T: Scalar>(fractions: &[T]) -> Result<Vec<T>, NumericsError> {
    for &f in fractions {
        if !(f >= T::zero() && f <= T::one()) {
            return Err(NumericsError::StickDomain(lossy(f)));
        }
    }
    let mut out = Vec::with_capacity(fractions.len() + 1);
    let mut remaining = T::one(); // product of (1 − b) so far
    let mut head = T::zero(); // running sum of emitted weights
    for &f in fractions {
        let w = (f * remaining).min(T::one() - head).max(T::zero());
        out.push(w);
        head = head + w;
        remaining = remaining * (T::one() - f);
    }
    out.push((T::one() - head).max(T::zero()));
    Ok(out)
}

/// Mean and centered second moment of a fixed-length collection, with O(1)
/// replacement of a single value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningMoments<T> {
    n: usize,
    mean: T,
    m2: T,
}

impl<T: Scalar> Default for RunningMoments<T> {
    fn default() -> Self {
        Self { n: 0, mean: T::zero(), m2: T::zero() }
    }
}

impl<T: Scalar> RunningMoments<T> {
    pub fn from_values(values: &[T]) -> Self {
        let mut m = Self::default();
        for &v in values {
            m.push(v);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    /// Population variance m₂/n (zero for empty or singleton collections).
    pub fn variance(&self) -> T {
        if self.n == 0 {
            T::zero()
        } else {
            (self.m2 / c::<T>(self.n as f64)).max(T::zero())
        }
    }

    pub fn push(&mut self, x: T) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean = self.mean + delta / c::<T>(self.n as f64);
        self.m2 = self.m2 + delta * (x - self.mean);
    }

    /// Replaces one occurrence of `old` with `new` without touching the rest
    /// of the collection.
    pub fn swap(&mut self, old: T, new: T) {
        debug_assert!(self.n > 0, "swap on empty moments");
        let delta = new - old;
        let mean = self.mean + delta / c::<T>(self.n as f64);
        self.m2 = (self.m2 + delta * ((old - self.mean) + (new - mean))).max(T::zero());
        self.mean = mean;
    }
}
