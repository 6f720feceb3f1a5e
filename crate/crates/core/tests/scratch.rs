//! Throwaway diagnostics for the recovery fixture; not part of the suite.

use sentopic::analytics;
use sentopic::inference::{train_batch, Hyperparams, StopRule};
use sentopic::regression::Levels;
use sentopic::synthgen::{generate, recovery_score, Sizes};
use sentopic::Real;

fn sign_of(x: Real) -> i8 {
    if x.abs() <= 1e-9 {
        0
    } else if x > 0.0 {
        1
    } else {
        -1
    }
}

#[test]
#[ignore]
fn seed_scan() {
    let gen_hp = Hyperparams {
        alpha: 10.0,
        theta: 0.03,
        lambda: vec![0.25; 3],
        k: 20,
        t: 4,
        epsilon: 0.01,
        ..Hyperparams::default()
    };
    let sizes = Sizes { docs: 5000, mean_len: 12.0, vocab: 200, users: 30, topics: 5 };
    let levels = Levels::default();
    for seed in 1..=40u64 {
        let (corpus, truth) = generate(&gen_hp, sizes, seed);
        let min_w = truth.weights.iter().cloned().fold(Real::INFINITY, Real::min);
        let max_w = truth.weights.iter().cloned().fold(0.0, Real::max);
        let kstar = truth.topics.nrows();
        let v = truth.sentiment.shape()[1];
        let mut planted = truth.sentiment.clone();
        for k in 0..kstar {
            for w in 0..v {
                let mass = truth.weights[k] * truth.topics[[k, w]];
                for ss in 0..3 {
                    planted[[k, w, ss]] *= mass;
                }
            }
        }
        let (truth_sent, _) = analytics::overall_sentiments(planted.view(), &levels);
        let counts = analytics::word_counts(&corpus);
        let qualifying: Vec<usize> =
            (0..v).filter(|&w| counts[w] >= 20).collect();
        let weak = qualifying.iter().filter(|&&w| truth_sent[w].abs() < 0.15).count();
        println!(
            "seed {seed:2} min_w {min_w:.3} max_w {max_w:.3} qualifying {} weak {}",
            qualifying.len(),
            weak
        );
    }
}

#[test]
#[ignore]
fn recovery_diag() {
    let gen_hp = Hyperparams {
        alpha: 10.0,
        theta: 0.03,
        lambda: vec![0.25; 3],
        k: 20,
        t: 4,
        epsilon: 0.01,
        ..Hyperparams::default()
    };
    let sizes = Sizes { docs: 5000, mean_len: 12.0, vocab: 200, users: 30, topics: 5 };
    let (corpus, truth) = generate(&gen_hp, sizes, 3);
    println!("tokens {} weights {:?}", corpus.n_tokens(), truth.weights);

    let hp = Hyperparams {
        k: 10,
        t: 4,
        m: 40,
        theta: 0.1,
        epsilon: 0.01,
        ..Hyperparams::default()
    };
    let stop = StopRule { max_iters: 120, tol: 1e-6, window: 3, wall_limit: None };
    let (globals, diags) = train_batch(&corpus, &hp, &stop, 17).unwrap();
    let tail: Vec<String> = diags
        .iter()
        .rev()
        .take(8)
        .map(|d| format!("{}:{:.4}", d.iteration, d.mae))
        .collect();
    println!("iters {} mae tail {:?}", diags.len(), tail);

    let report = recovery_score(&truth, &globals, &corpus, &hp.levels, 20);
    for m in &report.matches {
        println!(
            "planted {} -> learned {} cosine {:.3} tv {:.3}",
            m.planted, m.learned, m.cosine, m.total_variation
        );
    }
    println!(
        "mean cosine {:.3} sign agreement {:.3} qualifying {}",
        report.mean_cosine, report.sign_agreement, report.qualifying_words
    );

    // Pool the truth by exposure, mirroring the scorer, and bucket words by
    // how decisive their planted sign is.
    let levels = Levels::default();
    let kstar = truth.topics.nrows();
    let v = truth.sentiment.shape()[1];
    let mut planted = truth.sentiment.clone();
    for k in 0..kstar {
        for w in 0..v {
            let mass = truth.weights[k] * truth.topics[[k, w]];
            for ss in 0..3 {
                planted[[k, w, ss]] *= mass;
            }
        }
    }
    let (truth_sent, _) = analytics::overall_sentiments(planted.view(), &levels);
    let (learned_sent, _) = analytics::overall_sentiments(globals.lambda_t.view(), &levels);
    let counts = analytics::word_counts(&corpus);
    let mut buckets = [[0usize; 2]; 4]; // |truth| bucket x (agree, disagree)
    for w in 0..v {
        if counts[w] < 20 {
            continue;
        }
        let t = truth_sent[w];
        let l = learned_sent[w];
        let b = if t.abs() < 0.1 {
            0
        } else if t.abs() < 0.3 {
            1
        } else if t.abs() < 0.6 {
            2
        } else {
            3
        };
        let agree = sign_of(t) == sign_of(l);
        buckets[b][if agree { 0 } else { 1 }] += 1;
    }
    for (i, b) in buckets.iter().enumerate() {
        println!("bucket {i}: agree {} disagree {}", b[0], b[1]);
    }
    let mut worst: Vec<(Real, Real, usize)> = (0..v)
        .filter(|&w| counts[w] >= 20 && sign_of(truth_sent[w]) != sign_of(learned_sent[w]))
        .map(|w| (truth_sent[w], learned_sent[w], counts[w]))
        .collect();
    worst.sort_by(|a, b| b.0.abs().partial_cmp(&a.0.abs()).unwrap());
    for (t, l, c) in worst.iter().take(12) {
        println!("disagree: truth {t:.3} learned {l:.3} count {c}");
    }
}
