//! Joint topic, word-sentiment and user-preference modelling for review
//! corpora.
//!
//! The library infers, from nothing but review text, ratings, timestamps and
//! author ids, a set of corpus topics together with per-topic word sentiment
//! tables and per-topic user preference tables, tied together by a Beta
//! regression from word sentiment onto the observed rating.  Training is
//! mean-field coordinate ascent over a truncated stick-breaking topic
//! collection, available in three flavours:
//!
//! * batch ([`inference::train_batch`]): full sweeps over the corpus,
//! * stochastic ([`svi::train_stochastic`]): one sampled document per step,
//!   merged into the running state with a forgetting rate,
//! * online ([`svi::train_online`]): time-ordered batches folded into a model
//!   trained on a base window, with per-batch trend snapshots.
//!
//! [`predict`] scores held-out reviews against a frozen model and [`analytics`]
//! turns the variational state into point estimates (topic sentiment, user
//! preference, histograms).  [`synthgen`] draws corpora from the generative
//! process itself for calibration and recovery experiments.

pub mod analytics;
pub mod checkpoint;
pub mod corpus;
pub mod inference;
pub mod numerics;
pub mod predict;
pub mod regression;
mod seeds;
pub mod svi;
pub mod synthgen;

/// Scalar type used by the model pipeline.
///
/// The numeric kernels in [`numerics`] are generic over the float width; the
/// model layers are pinned to `f64` because the default rating floor
/// (`1e-300`) is not representable at `f32`.
pub type Real = f64;



