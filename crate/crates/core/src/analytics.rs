//! Point estimates and exports over fitted global tables: word and topic
//! sentiments, user preferences, concentrations, top words, and the CSV
//! writers behind them.

use std::io::Write;

use ndarray::{ArrayView2, ArrayView3};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::inference::GlobalState;
use crate::predict::PredictionRow;
use crate::regression::Levels;
use crate::Real;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("index {0} is out of range ({1} available)")]
    IndexOutOfRange(usize, usize),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check(idx: usize, limit: usize) -> Result<(), AnalyticsError> {
    if idx >= limit {
        return Err(AnalyticsError::IndexOutOfRange(idx, limit));
    }
    Ok(())
}

/// Level-weighted mean of a normalized parameter row.
fn weighted_ratio(row: impl Iterator<Item = Real> + Clone, weights: &[Real]) -> Real {
    let sum: Real = row.clone().sum();
    row.zip(weights).map(|(x, &w)| w * x / sum).sum()
}

/// Sentiment estimate for one word in one topic: the normalized lambda row
/// and its S-weighted scalar in [-1, 1].
pub fn word_topic_sentiment(
    lambda_t: ArrayView3<Real>,
    levels: &Levels,
    k: usize,
    v: usize,
) -> Result<(Vec<Real>, Real), AnalyticsError> {
    check(k, lambda_t.shape()[0])?;
    check(v, lambda_t.shape()[1])?;
    let row = lambda_t.slice(ndarray::s![k, v, ..]);
    let sum = row.sum();
    let estimate: Vec<Real> = row.iter().map(|&x| x / sum).collect();
    let scalar = estimate.iter().zip(&levels.sentiment).map(|(&p, &s)| p * s).sum();
    Ok((estimate, scalar))
}

/// Preference estimate for one user in one topic: the normalized eta row
/// and its U-weighted scalar.
pub fn user_topic_preference(
    eta_t: ArrayView3<Real>,
    levels: &Levels,
    k: usize,
    c: usize,
) -> Result<(Vec<Real>, Real), AnalyticsError> {
    check(k, eta_t.shape()[0])?;
    check(c, eta_t.shape()[1])?;
    let row = eta_t.slice(ndarray::s![k, c, ..]);
    let sum = row.sum();
    let estimate: Vec<Real> = row.iter().map(|&x| x / sum).collect();
    let scalar = estimate.iter().zip(&levels.preference).map(|(&p, &u)| p * u).sum();
    Ok((estimate, scalar))
}

/// Overall sentiment per word (mass pooled over topics) and per topic
/// (pooled over words).
pub fn overall_sentiments(
    lambda_t: ArrayView3<Real>,
    levels: &Levels,
) -> (Vec<Real>, Vec<Real>) {
    let (k, v, _) = lambda_t.dim();
    let per_word = (0..v)
        .map(|vv| {
            weighted_ratio(
                (0..levels.n_s())
                    .map(|ss| (0..k).map(|kk| lambda_t[[kk, vv, ss]]).sum::<Real>()),
                &levels.sentiment,
            )
        })
        .collect();
    let per_topic = (0..k).map(|kk| topic_sentiment(lambda_t, levels, kk)).collect();
    (per_word, per_topic)
}

/// S-weighted sentiment of one topic with its word mass pooled.
pub fn topic_sentiment(lambda_t: ArrayView3<Real>, levels: &Levels, k: usize) -> Real {
    let v = lambda_t.shape()[1];
    weighted_ratio(
        (0..levels.n_s()).map(|ss| (0..v).map(|vv| lambda_t[[k, vv, ss]]).sum::<Real>()),
        &levels.sentiment,
    )
}

/// U-weighted preference of one topic with its user mass pooled.
pub fn topic_preference(eta_t: ArrayView3<Real>, levels: &Levels, k: usize) -> Real {
    let c = eta_t.shape()[1];
    weighted_ratio(
        (0..levels.n_u()).map(|uu| (0..c).map(|cc| eta_t[[k, cc, uu]]).sum::<Real>()),
        &levels.preference,
    )
}

/// The 1-norm of one parameter vector in a (topic, index, level) table,
/// read as confidence in the matching estimate.
pub fn concentration(
    table: ArrayView3<Real>,
    k: usize,
    idx: usize,
) -> Result<Real, AnalyticsError> {
    check(k, table.shape()[0])?;
    check(idx, table.shape()[1])?;
    Ok(table.slice(ndarray::s![k, idx, ..]).sum())
}

/// Total word mass of one topic row, the per-topic confidence scalar used
/// in trend snapshots.
pub fn topic_concentration(theta_t: ArrayView2<Real>, k: usize) -> Real {
    theta_t.row(k).sum()
}

/// The `n` heaviest words of a topic, ties broken toward the lower index.
pub fn top_words(theta_t: ArrayView2<Real>, k: usize, n: usize) -> Vec<(usize, Real)> {
    let row = theta_t.row(k);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).expect("finite weights").then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(n.min(row.len()))
        .map(|v| (v, row[v]))
        .collect()
}

/// Corpus occurrence count per vocabulary index.
pub fn word_counts(corpus: &Corpus) -> Vec<usize> {
    let mut counts = vec![0usize; corpus.vocab.len()];
    for r in &corpus.reviews {
        for &t in &r.tokens {
            counts[t] += 1;
        }
    }
    counts
}

/// Binned distribution of per-word sentiment over [-1, 1] for words that
/// clear the occurrence threshold, with the unbinned mean and standard
/// deviation alongside.
#[derive(Debug, Clone)]
pub struct SentimentHistogram {
    pub bins: Vec<usize>,
    pub mean: Real,
    pub std: Real,
    /// Words that cleared the threshold.
    pub included: usize,
}

pub fn sentiment_histogram(
    lambda_t: ArrayView3<Real>,
    levels: &Levels,
    counts: &[usize],
    min_occurrences: usize,
    bins: usize,
) -> SentimentHistogram {
    let (per_word, _) = overall_sentiments(lambda_t, levels);
    let kept: Vec<Real> = per_word
        .iter()
        .zip(counts)
        .filter(|&(_, &c)| c > min_occurrences)
        .map(|(&s, _)| s)
        .collect();
    let mut hist = vec![0usize; bins];
    for &s in &kept {
        let at = (((s + 1.0) / 2.0 * bins as Real) as usize).min(bins - 1);
        hist[at] += 1;
    }
    let n = kept.len() as Real;
    let mean = if kept.is_empty() { 0.0 } else { kept.iter().sum::<Real>() / n };
    let var = if kept.is_empty() {
        0.0
    } else {
        kept.iter().map(|&s| (s - mean) * (s - mean)).sum::<Real>() / n
    };
    SentimentHistogram { bins: hist, mean, std: var.sqrt(), included: kept.len() }
}

/// Quotes one CSV field per RFC 4180: fields holding commas, quotes, or
/// line breaks are wrapped in double quotes with inner quotes doubled.
pub fn csv_field(field: &str) -> String {
    if field.contains(['"', ',', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_owned()
    }
}

fn io_err(source: std::io::Error) -> AnalyticsError {
    AnalyticsError::Io { path: "<writer>".to_owned(), source }
}

/// Per-word sentiment export: word, pooled sentiment, pooled concentration
/// (the mass behind the estimate), and corpus occurrence count.
pub fn write_word_sentiments_csv(
    mut w: impl Write,
    corpus: &Corpus,
    lambda_t: ArrayView3<Real>,
    levels: &Levels,
) -> Result<(), AnalyticsError> {
    let (per_word, _) = overall_sentiments(lambda_t, levels);
    let counts = word_counts(corpus);
    let k = lambda_t.shape()[0];
    writeln!(w, "word,sentiment,concentration,count").map_err(io_err)?;
    for (v, (&s, &count)) in per_word.iter().zip(&counts).enumerate() {
        let mass: Real = (0..k)
            .map(|kk| lambda_t.slice(ndarray::s![kk, v, ..]).sum())
            .sum();
        writeln!(
            w,
            "{},{s},{mass},{count}",
            csv_field(corpus.vocab.name(v))
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Per-topic summary export: sentiment, preference, concentration, and the
/// topic's heaviest words space-joined.
pub fn write_topic_summary_csv(
    mut w: impl Write,
    corpus: &Corpus,
    globals: &GlobalState,
    levels: &Levels,
    words_per_topic: usize,
) -> Result<(), AnalyticsError> {
    writeln!(w, "topic,sentiment,preference,concentration,top_words").map_err(io_err)?;
    for k in 0..globals.n_topics() {
        let sentiment = topic_sentiment(globals.lambda_t.view(), levels, k);
        let preference = topic_preference(globals.eta_t.view(), levels, k);
        let conc = topic_concentration(globals.theta_t.view(), k);
        let words: Vec<&str> = top_words(globals.theta_t.view(), k, words_per_topic)
            .into_iter()
            .map(|(v, _)| corpus.vocab.name(v))
            .collect();
        writeln!(
            w,
            "{k},{sentiment},{preference},{conc},{}",
            csv_field(&words.join(" "))
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Prediction report: one row per document and a trailing `mae` summary row
/// (its value sits in the abs_error column).
pub fn write_predictions_csv(
    mut w: impl Write,
    rows: &[PredictionRow],
) -> Result<(), AnalyticsError> {
    writeln!(w, "doc_id,raw_rating,predicted,abs_error").map_err(io_err)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.doc_id, r.raw_rating, r.predicted, r.abs_err)
            .map_err(io_err)?;
    }
    writeln!(w, "mae,,,{}", crate::predict::mae(rows)).map_err(io_err)?;
    Ok(())
}

/// Trend export: one row per topic per snapshot step.
pub fn write_trend_csv(
    mut w: impl Write,
    series: &crate::svi::TrendSeries,
) -> Result<(), AnalyticsError> {
    writeln!(w, "step,batch_end_time,topic_id,sentiment,preference,concentration")
        .map_err(io_err)?;
    for s in &series.snapshots {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.step, s.end_time, s.topic, s.sentiment, s.preference, s.concentration
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Histogram export: one row per bin with its [-1, 1] span, then unbinned
/// summary rows.
pub fn write_histogram_csv(
    mut w: impl Write,
    hist: &SentimentHistogram,
) -> Result<(), AnalyticsError> {
    writeln!(w, "bin_lo,bin_hi,count").map_err(io_err)?;
    let width = 2.0 / hist.bins.len() as Real;
    for (i, &count) in hist.bins.iter().enumerate() {
        let lo = -1.0 + width * i as Real;
        writeln!(w, "{lo},{},{count}", lo + width).map_err(io_err)?;
    }
    writeln!(w, "mean,,{}", hist.mean).map_err(io_err)?;
    writeln!(w, "std,,{}", hist.std).map_err(io_err)?;
    writeln!(w, "included,,{}", hist.included).map_err(io_err)?;
    Ok(())
}
