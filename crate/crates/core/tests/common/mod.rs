//! Helpers and independent oracles shared by the integration tests.
//!
//! The oracles here deliberately avoid the library's numeric helpers: they
//! use direct exponentiation and plain summation so that a bug in the
//! log-domain code cannot hide behind the same bug in the check.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use sprec_core::policy::Policy;
use sprec_core::rng::{rng_from_seed, LabRng};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> LabRng {
    rng_from_seed(seed)
}

pub fn random_policy(rng: &mut LabRng, n_contexts: usize, n_items: usize, scale: f64) -> Policy {
    let logits = (0..n_contexts * n_items).map(|_| rng.gen_range(-scale..scale)).collect();
    Policy::from_logits(n_contexts, n_items, logits).unwrap()
}

/// Strictly positive distribution with log-weights uniform on `[-2, 2]`.
pub fn random_simplex(rng: &mut LabRng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0f64..2.0).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn with_logits(policy: &Policy, logits: Vec<f64>) -> Policy {
    Policy::from_logits(policy.n_contexts(), policy.n_items(), logits).unwrap()
}

/// Central finite differences of `f` over every logit.
pub fn fd_gradient(policy: &Policy, f: impl Fn(&Policy) -> f64) -> Vec<f64> {
    let base = policy.logits().to_vec();
    (0..base.len())
        .map(|i| {
            let mut up = base.clone();
            let mut down = base.clone();
            up[i] += FD_STEP;
            down[i] -= FD_STEP;
            (f(&with_logits(policy, up)) - f(&with_logits(policy, down))) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest componentwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Softmax by direct exponentiation; only valid for moderate logits.
pub fn naive_probs(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|z| z.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn naive_row(policy: &Policy, context: usize) -> Vec<f64> {
    naive_probs(policy.row(context).unwrap())
}

/// `-ln σ(x)` straight from the definition.
pub fn naive_neg_log_sigmoid(x: f64) -> f64 {
    -(1.0 / (1.0 + (-x).exp())).ln()
}

/// Pairwise DPO term from probabilities.
pub fn naive_pair(pi: &[f64], pr: &[f64], w: usize, l: usize, beta: f64) -> f64 {
    let m = (pi[w] / pr[w]).ln() - (pi[l] / pr[l]).ln();
    naive_neg_log_sigmoid(beta * m)
}

/// `Σ_w Σ_l p(w) neg(l) pair(w, l)` over all ordered pairs.
pub fn naive_enumeration(pi: &[f64], pr: &[f64], p: &[f64], neg: &[f64], beta: f64) -> f64 {
    let mut total = 0.0;
    for w in 0..p.len() {
        for l in 0..neg.len() {
            total += p[w] * neg[l] * naive_pair(pi, pr, w, l, beta);
        }
    }
    total
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

/// Brute-force metric recomputations on plain vectors.
pub mod brute {
    pub fn hr_ndcg(ranks: &[usize], k: usize) -> (f64, f64) {
        let mut hits = 0usize;
        let mut gain = 0.0;
        for &r in ranks {
            if r <= k {
                hits += 1;
                gain += 1.0 / ((r + 1) as f64).log2();
            }
        }
        (hits as f64 / ranks.len() as f64, gain / ranks.len() as f64)
    }

    pub fn div_ratio(recs: &[usize]) -> f64 {
        let unique = (0..recs.len()).filter(|&i| !recs[..i].contains(&recs[i])).count();
        unique as f64 / recs.len() as f64
    }

    /// Repeatedly takes the most frequent remaining item, lowest id first.
    pub fn or_ratio(recs: &[usize], top_m: usize) -> f64 {
        let mut remaining: Vec<usize> = recs.to_vec();
        let mut covered = 0usize;
        for _ in 0..top_m {
            if remaining.is_empty() {
                break;
            }
            let mut best = remaining[0];
            let count = |x: usize, v: &[usize]| v.iter().filter(|&&y| y == x).count();
            for &x in &remaining {
                let (cx, cb) = (count(x, &remaining), count(best, &remaining));
                if cx > cb || (cx == cb && x < best) {
                    best = x;
                }
            }
            covered += count(best, &remaining);
            remaining.retain(|&y| y != best);
        }
        covered as f64 / recs.len() as f64
    }

    pub fn shares(labels: &[usize], n_labels: usize) -> Vec<f64> {
        (0..n_labels)
            .map(|g| labels.iter().filter(|&&l| l == g).count() as f64 / labels.len() as f64)
            .collect()
    }

    pub fn mgu(rec: &[f64], hist: &[f64]) -> f64 {
        rec.iter().zip(hist).map(|(a, b)| (a - b).abs()).sum::<f64>() / rec.len() as f64
    }
}

/// Compares every log metric with its brute-force recomputation on one
/// random log of at most 20 entries. Returns a description of the first
/// mismatch.
pub fn check_random_log(r: &mut LabRng, catalog: &sprec_core::catalog::ItemCatalog) -> Option<String> {
    use sprec_core::catalog::InteractionSet;
    use sprec_core::metrics::*;

    let n = catalog.n_items;
    let len = r.gen_range(1..=20);
    let entries: Vec<LogEntry> = (0..len)
        .map(|_| LogEntry {
            context: 0,
            recommended: r.gen_range(0..n),
            ground_truth: r.gen_range(0..n),
            rank: r.gen_range(1..=n),
        })
        .collect();
    let log = RecommendationLog { entries };
    let recs: Vec<usize> = log.entries.iter().map(|e| e.recommended).collect();
    let ranks: Vec<usize> = log.entries.iter().map(|e| e.rank).collect();
    let hist_len = r.gen_range(1..=20);
    let hist = InteractionSet::from_records(1, n, (0..hist_len).map(|_| (0, r.gen_range(0..n))).collect()).unwrap();
    let k = r.gen_range(1..=n);
    let m = r.gen_range(1..=5);

    let (hr, ndcg) = hr_ndcg_at_k(&log, k).unwrap();
    let (bhr, bndcg) = brute::hr_ndcg(&ranks, k);
    if hr != bhr || (ndcg - bndcg).abs() > 1e-12 {
        return Some(format!("hr/ndcg ({hr}, {ndcg}) vs ({bhr}, {bndcg})"));
    }
    if div_ratio(&log).unwrap() != brute::div_ratio(&recs) {
        return Some(format!("div_ratio on {recs:?}"));
    }
    if or_ratio(&log, m).unwrap() != brute::or_ratio(&recs, m) {
        return Some(format!("or_ratio m={m} on {recs:?}"));
    }
    let groups: Vec<usize> = recs.iter().map(|&i| catalog.group_of[i]).collect();
    if group_share(&log, catalog).unwrap() != brute::shares(&groups, catalog.n_groups) {
        return Some(format!("group_share on {recs:?}"));
    }
    let rec_cat: Vec<usize> = recs.iter().map(|&i| catalog.category_of[i]).collect();
    let hist_cat: Vec<usize> = hist.records.iter().map(|&(_, i)| catalog.category_of[i]).collect();
    let br = brute::shares(&rec_cat, catalog.n_categories);
    let bh = brute::shares(&hist_cat, catalog.n_categories);
    let rc = category_distribution(&log, catalog).unwrap();
    let hc = history_category_distribution(&hist, catalog).unwrap();
    if rc != br || hc != bh {
        return Some("category distributions".into());
    }
    let (_, mgu) = group_unfairness(&rc, &hc).unwrap();
    if (mgu - brute::mgu(&br, &bh)).abs() > 1e-12 {
        return Some(format!("mgu {mgu} vs {}", brute::mgu(&br, &bh)));
    }
    None
}

/// 12 items, 4 categories, 3 popularity groups.
pub fn tiny_catalog() -> sprec_core::catalog::ItemCatalog {
    sprec_core::catalog::CatalogParams {
        n_items: 12,
        n_categories: 4,
        n_groups: 3,
        seed: 3,
        ..Default::default()
    }
    .build()
    .unwrap()
}
