//! Accuracy, diversity, concentration and fairness metrics.
//!
//! Counting metrics (HR, NDCG, DivRatio, ORRatio, GU) are computed from a
//! [`RecommendationLog`]. Group shares and the distance to popularity in a
//! [`MetricsReport`] use the policy's exact recommendation distribution, so
//! they carry no sampling noise.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{InteractionSet, ItemCatalog};
use crate::numeric::pairwise_sum;
use crate::policy::Policy;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub context: usize,
    pub recommended: usize,
    pub ground_truth: usize,
    /// 1-based position of the ground truth in the full policy ranking.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecommendationLog {
    pub entries: Vec<LogEntry>,
}

/// How the recommended item of a log entry is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendMode {
    /// A draw from `π(·|x)`, the tabular analogue of decoding one item.
    #[default]
    Sampled,
    /// The top-ranked item.
    Greedy,
}

impl RecommendationLog {
    /// One entry per validation record.
    pub fn from_policy(
        policy: &Policy,
        validation: &InteractionSet,
        mode: RecommendMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if validation.n_contexts != policy.n_contexts() || validation.n_items != policy.n_items() {
            return Err(Error::invalid("validation", "shape differs from the policy"));
        }
        let mut positions: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut entries = Vec::with_capacity(validation.len());
        for &(context, truth) in &validation.records {
            if let std::collections::hash_map::Entry::Vacant(e) = positions.entry(context) {
                let ranking = policy.ranking(context)?;
                let mut pos = vec![0; ranking.len()];
                for (r, &item) in ranking.iter().enumerate() {
                    pos[item] = r + 1;
                }
                e.insert(pos);
            }
            let pos = &positions[&context];
            let recommended = match mode {
                RecommendMode::Sampled => policy.sample_item(context, rng)?,
                RecommendMode::Greedy => policy.top_k_items(context, 1)?[0],
            };
            entries.push(LogEntry {
                context,
                recommended,
                ground_truth: truth,
                rank: pos[truth],
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn non_empty(&self) -> Result<()> {
        if self.entries.is_empty() {
            Err(Error::Empty("recommendation log"))
        } else {
            Ok(())
        }
    }

    /// Recommendation counts per item, as (item, count) sorted by count
    /// descending then item id ascending.
    pub fn frequency_ranking(&self) -> Vec<(usize, usize)> {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for e in &self.entries {
            *counts.entry(e.recommended).or_default() += 1;
        }
        let mut out: Vec<(usize, usize)> = counts.into_iter().collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }
}

pub fn hr_ndcg_at_k(log: &RecommendationLog, k: usize) -> Result<(f64, f64)> {
    log.non_empty()?;
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let mut hits = Vec::with_capacity(log.len());
    let mut gains = Vec::with_capacity(log.len());
    for e in &log.entries {
        if e.rank == 0 {
            return Err(Error::invalid("log.rank", "ranks are 1-based"));
        }
        if e.rank <= k {
            hits.push(1.0);
            gains.push(1.0 / ((e.rank + 1) as f64).log2());
        }
    }
    let n = log.len() as f64;
    Ok((pairwise_sum(&hits) / n, pairwise_sum(&gains) / n))
}

/// Unique recommended items over total recommendations.
pub fn div_ratio(log: &RecommendationLog) -> Result<f64> {
    log.non_empty()?;
    Ok(log.frequency_ranking().len() as f64 / log.len() as f64)
}

/// Share of recommendations taken by the `top_m` most frequent items.
pub fn or_ratio(log: &RecommendationLog, top_m: usize) -> Result<f64> {
    log.non_empty()?;
    if top_m == 0 {
        return Err(Error::invalid("top_m", "must be at least 1"));
    }
    let covered: usize = log.frequency_ranking().iter().take(top_m).map(|&(_, c)| c).sum();
    Ok(covered as f64 / log.len() as f64)
}

pub fn group_share(log: &RecommendationLog, catalog: &ItemCatalog) -> Result<Vec<f64>> {
    log.non_empty()?;
    let mut counts = vec![0usize; catalog.n_groups];
    for e in &log.entries {
        let g = *catalog
            .group_of
            .get(e.recommended)
            .ok_or_else(|| Error::invalid("log.recommended", "item id outside the catalog"))?;
        counts[g] += 1;
    }
    let n = log.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Distribution of recommended categories in a log.
pub fn category_distribution(log: &RecommendationLog, catalog: &ItemCatalog) -> Result<Vec<f64>> {
    log.non_empty()?;
    let mut counts = vec![0usize; catalog.n_categories];
    for e in &log.entries {
        let c = *catalog
            .category_of
            .get(e.recommended)
            .ok_or_else(|| Error::invalid("log.recommended", "item id outside the catalog"))?;
        counts[c] += 1;
    }
    let n = log.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Category distribution of the logged positives.
pub fn history_category_distribution(interactions: &InteractionSet, catalog: &ItemCatalog) -> Result<Vec<f64>> {
    if interactions.is_empty() {
        return Err(Error::Empty("interactions"));
    }
    let mut counts = vec![0usize; catalog.n_categories];
    for &(_, item) in &interactions.records {
        counts[catalog.category_of[item]] += 1;
    }
    let n = interactions.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Per-category gap `|rec(c) - hist(c)|` and its mean (MGU).
pub fn group_unfairness(rec: &[f64], hist: &[f64]) -> Result<(Vec<f64>, f64)> {
    if rec.len() != hist.len() {
        return Err(Error::invalid("hist", "category count differs from rec"));
    }
    if rec.is_empty() {
        return Err(Error::Empty("category distributions"));
    }
    let gu: Vec<f64> = rec.iter().zip(hist).map(|(a, b)| (a - b).abs()).collect();
    let mgu = pairwise_sum(&gu) / gu.len() as f64;
    Ok((gu, mgu))
}

pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("q", "length differs from p"));
    }
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    Ok(pairwise_sum(&d) / 2.0)
}

/// Fixed CSV header for `n_groups` popularity groups.
pub fn csv_header(n_groups: usize) -> Vec<String> {
    let mut h: Vec<String> = ["arm", "iteration", "phase", "hr", "ndcg", "div_ratio", "or_ratio", "mgu"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n_groups).map(|g| format!("group_share_{g}")));
    h.push("tv_to_popularity".into());
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub div_ratio: f64,
    pub or_ratio: f64,
    pub mgu: f64,
    pub gu_per_category: Vec<f64>,
    pub group_share: Vec<f64>,
    pub tv_to_popularity: f64,
}

impl MetricsReport {
    /// Values in [`csv_header`] order, after the three key columns.
    pub fn csv_values(&self) -> Vec<f64> {
        let mut v = vec![self.hr_at_k, self.ndcg_at_k, self.div_ratio, self.or_ratio, self.mgu];
        v.extend(&self.group_share);
        v.push(self.tv_to_popularity);
        v
    }
}

/// Evaluates policies against a fixed validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluator {
    pub k: usize,
    pub top_m: usize,
    pub mode: RecommendMode,
    pub seed: u64,
}

impl Default for Evaluator {
    fn default() -> Self {
        Self {
            k: 5,
            top_m: 3,
            mode: RecommendMode::Sampled,
            seed: 0,
        }
    }
}

impl Evaluator {
    /// Context-averaged recommendation distribution and popularity, with
    /// contexts weighted by their validation frequency.
    pub fn mixture(policy: &Policy, catalog: &ItemCatalog, validation: &InteractionSet) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        if validation.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let n = catalog.n_items;
        let total = validation.len() as f64;
        let mut rec = vec![0.0; n];
        let mut pop = vec![0.0; n];
        let mut tv = 0.0;
        for c in 0..catalog.n_contexts {
            let w = validation.context_total(c) as f64 / total;
            if w == 0.0 {
                continue;
            }
            let pi = policy.probs(c)?;
            let pd = catalog.popularity(c)?;
            for y in 0..n {
                rec[y] += w * pi[y];
                pop[y] += w * pd[y];
            }
            tv += w * total_variation(&pi, pd)?;
        }
        Ok((rec, pop, tv))
    }

    pub fn evaluate(
        &self,
        policy: &Policy,
        catalog: &ItemCatalog,
        validation: &InteractionSet,
        history: &InteractionSet,
    ) -> Result<MetricsReport> {
        let mut rng = crate::rng::rng_from_seed(self.seed);
        let log = RecommendationLog::from_policy(policy, validation, self.mode, &mut rng)?;
        let (hr_at_k, ndcg_at_k) = hr_ndcg_at_k(&log, self.k)?;
        let rec_cat = category_distribution(&log, catalog)?;
        let hist_cat = history_category_distribution(history, catalog)?;
        let (gu_per_category, mgu) = group_unfairness(&rec_cat, &hist_cat)?;
        let (rec, _, tv_to_popularity) = Self::mixture(policy, catalog, validation)?;
        let mut group_share = catalog.group_mass(&rec);
        let total = pairwise_sum(&group_share);
        for g in &mut group_share {
            *g /= total;
        }
        Ok(MetricsReport {
            hr_at_k,
            ndcg_at_k,
            div_ratio: div_ratio(&log)?,
            or_ratio: or_ratio(&log, self.top_m)?,
            mgu,
            gu_per_category,
            group_share,
            tv_to_popularity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_of(recs: &[usize]) -> RecommendationLog {
        RecommendationLog {
            entries: recs
                .iter()
                .map(|&r| LogEntry {
                    context: 0,
                    recommended: r,
                    ground_truth: 0,
                    rank: 1,
                })
                .collect(),
        }
    }

    fn ranked(ranks: &[usize]) -> RecommendationLog {
        RecommendationLog {
            entries: ranks
                .iter()
                .map(|&rank| LogEntry {
                    context: 0,
                    recommended: 0,
                    ground_truth: 0,
                    rank,
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_rank() {
        assert_eq!(hr_ndcg_at_k(&ranked(&[1]), 5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn rank_three() {
        let (hr, ndcg) = hr_ndcg_at_k(&ranked(&[3]), 5).unwrap();
        assert_eq!(hr, 1.0);
        assert!((ndcg - 0.5).abs() < 1e-15);
        assert_eq!(hr_ndcg_at_k(&ranked(&[6]), 5).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn empty_log_errors() {
        let log = RecommendationLog::default();
        assert!(hr_ndcg_at_k(&log, 5).is_err());
        assert!(div_ratio(&log).is_err());
        assert!(or_ratio(&log, 3).is_err());
    }

    #[test]
    fn div_and_or_counting() {
        // A, A, B, C, D
        let log = log_of(&[0, 0, 1, 2, 3]);
        assert!((div_ratio(&log).unwrap() - 0.8).abs() < 1e-15);
        assert!((or_ratio(&log, 3).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(log.frequency_ranking()[..3], [(0, 2), (1, 1), (2, 1)]);
        assert!((div_ratio(&log_of(&[4; 6])).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(or_ratio(&log_of(&[4; 6]), 3).unwrap(), 1.0);
        let all: Vec<usize> = (0..20).collect();
        assert_eq!(div_ratio(&log_of(&all)).unwrap(), 1.0);
        assert!((or_ratio(&log_of(&all), 3).unwrap() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn gu_examples() {
        let (gu, mgu) = group_unfairness(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert_eq!(gu, vec![0.0, 0.0]);
        assert_eq!(mgu, 0.0);
        let (gu, mgu) = group_unfairness(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_eq!(gu, vec![0.5, 0.5]);
        assert_eq!(mgu, 0.5);
        assert!(group_unfairness(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(total_variation(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn header_is_fixed() {
        assert_eq!(
            csv_header(2).join(","),
            "arm,iteration,phase,hr,ndcg,div_ratio,or_ratio,mgu,group_share_0,group_share_1,tv_to_popularity"
        );
    }

    #[test]
    fn group_share_all_items_once() {
        let cat = crate::catalog::CatalogParams::default().build().unwrap();
        let all: Vec<usize> = (0..cat.n_items).collect();
        let share = group_share(&log_of(&all), &cat).unwrap();
        for s in share {
            assert!((s - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn greedy_log_recommends_top_item() {
        let pol = Policy::from_logits(1, 3, vec![0.0, 2.0, 1.0]).unwrap();
        let val = InteractionSet::from_records(1, 3, vec![(0, 0), (0, 2)]).unwrap();
        let mut rng = crate::rng::rng_from_seed(0);
        let log = RecommendationLog::from_policy(&pol, &val, RecommendMode::Greedy, &mut rng).unwrap();
        assert!(log.entries.iter().all(|e| e.recommended == 1));
        assert_eq!(log.entries[0].rank, 3);
        assert_eq!(log.entries[1].rank, 2);
    }
}
