//! Synthetic recommendation world: items, categories, per-context Zipf
//! popularity `p_D(y|x)`, popularity groups and logged interactions.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::pairwise_sum;
use crate::rng::{derive_seed, rng_from_seed, LabRng};
use crate::{Error, Result};

/// How categories relate to popularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryAssignment {
    /// Round-robin labels shuffled by seed; independent of popularity.
    #[default]
    Independent,
    /// Contiguous blocks of the popularity ranking share a category, so the
    /// head of the catalog is dominated by a few categories.
    ByPopularity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogParams {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_contexts: usize,
    pub zipf_exponent: f64,
    pub n_groups: usize,
    pub categories: CategoryAssignment,
    pub seed: u64,
}

impl Default for CatalogParams {
    fn default() -> Self {
        Self {
            n_items: 100,
            n_categories: 8,
            n_contexts: 1,
            zipf_exponent: 1.2,
            n_groups: 5,
            categories: CategoryAssignment::Independent,
            seed: 0,
        }
    }
}

impl CatalogParams {
    pub fn build(&self) -> Result<ItemCatalog> {
        let catalog = build_catalog_with(
            self.n_items,
            self.n_categories,
            self.n_contexts,
            self.zipf_exponent,
            self.seed,
            self.categories,
        )?;
        assign_popularity_groups(catalog, self.n_groups)
    }
}

/// The item universe and its ground-truth popularity.
///
/// JSON layout:
///
/// ```text
/// { "n_items": I, "n_categories": K, "n_contexts": C, "n_groups": G,
///   "category_of": [I ints], "group_of": [I ints],
///   "popularity": [C arrays of I floats] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_contexts: usize,
    pub n_groups: usize,
    pub category_of: Vec<usize>,
    pub group_of: Vec<usize>,
    pub popularity: Vec<Vec<f64>>,
}

impl ItemCatalog {
    /// Builds a catalog from explicit popularity rows. Items get category 0
    /// and a single group until [`assign_popularity_groups`] is applied.
    pub fn from_popularity(popularity: Vec<Vec<f64>>) -> Result<Self> {
        let n_contexts = popularity.len();
        if n_contexts == 0 {
            return Err(Error::Empty("popularity rows"));
        }
        let n_items = popularity[0].len();
        for (c, row) in popularity.iter().enumerate() {
            if row.len() != n_items {
                return Err(Error::invalid(
                    format!("popularity[{c}]"),
                    format!("expected {n_items} entries, got {}", row.len()),
                ));
            }
            crate::numeric::check_distribution(&format!("popularity[{c}]"), row)?;
        }
        Ok(Self {
            n_items,
            n_categories: 1,
            n_contexts,
            n_groups: 1,
            category_of: vec![0; n_items],
            group_of: vec![0; n_items],
            popularity,
        })
    }

    pub fn popularity(&self, context: usize) -> Result<&[f64]> {
        self.popularity
            .get(context)
            .map(Vec::as_slice)
            .ok_or(Error::ContextOutOfRange {
                context,
                n_contexts: self.n_contexts,
            })
    }

    /// Popularity averaged over contexts, used as the grouping key.
    pub fn mean_popularity(&self) -> Vec<f64> {
        (0..self.n_items)
            .map(|i| {
                let col: Vec<f64> = self.popularity.iter().map(|row| row[i]).collect();
                pairwise_sum(&col) / self.n_contexts as f64
            })
            .collect()
    }

    pub fn group_members(&self, group: usize) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| self.group_of[i] == group)
            .collect()
    }

    /// Mass of each popularity group under an item distribution.
    pub fn group_mass(&self, dist: &[f64]) -> Vec<f64> {
        let mut mass = vec![0.0; self.n_groups];
        for (item, &p) in dist.iter().enumerate() {
            mass[self.group_of[item]] += p;
        }
        mass
    }

    /// Mass of each category under an item distribution.
    pub fn category_mass(&self, dist: &[f64]) -> Vec<f64> {
        let mut mass = vec![0.0; self.n_categories];
        for (item, &p) in dist.iter().enumerate() {
            mass[self.category_of[item]] += p;
        }
        mass
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let catalog: Self = serde_json::from_str(s)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        if self.category_of.len() != self.n_items || self.group_of.len() != self.n_items {
            return Err(Error::invalid("catalog", "per-item arrays must have n_items entries"));
        }
        if self.popularity.len() != self.n_contexts {
            return Err(Error::invalid("catalog.popularity", "expected n_contexts rows"));
        }
        for (c, row) in self.popularity.iter().enumerate() {
            if row.len() != self.n_items {
                return Err(Error::invalid(format!("catalog.popularity[{c}]"), "wrong length"));
            }
            crate::numeric::check_distribution(&format!("catalog.popularity[{c}]"), row)?;
        }
        if self.category_of.iter().any(|&c| c >= self.n_categories) {
            return Err(Error::invalid("catalog.category_of", "category id out of range"));
        }
        if self.group_of.iter().any(|&g| g >= self.n_groups) {
            return Err(Error::invalid("catalog.group_of", "group id out of range"));
        }
        Ok(())
    }
}

/// Normalized Zipf weights `r^{-s} / Σ r^{-s}` for ranks `1..=n`.
pub fn zipf_weights(n_items: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n_items).map(|r| (r as f64).powf(-exponent)).collect();
    let total = pairwise_sum(&raw);
    raw.into_iter().map(|w| w / total).collect()
}

pub fn build_catalog(
    n_items: usize,
    n_categories: usize,
    n_contexts: usize,
    zipf_exponent: f64,
    seed: u64,
) -> Result<ItemCatalog> {
    build_catalog_with(
        n_items,
        n_categories,
        n_contexts,
        zipf_exponent,
        seed,
        CategoryAssignment::Independent,
    )
}

/// Each context's popularity row is an independently shuffled Zipf law.
/// The exponent may be zero (uniform popularity) but not negative.
pub fn build_catalog_with(
    n_items: usize,
    n_categories: usize,
    n_contexts: usize,
    zipf_exponent: f64,
    seed: u64,
    categories: CategoryAssignment,
) -> Result<ItemCatalog> {
    if n_items < 2 {
        return Err(Error::invalid("n_items", "need at least 2 items"));
    }
    if !(zipf_exponent >= 0.0) || !zipf_exponent.is_finite() {
        return Err(Error::invalid("zipf_exponent", "must be finite and non-negative"));
    }
    if n_categories == 0 {
        return Err(Error::invalid("n_categories", "must be positive"));
    }
    if n_contexts == 0 {
        return Err(Error::invalid("n_contexts", "must be positive"));
    }

    let weights = zipf_weights(n_items, zipf_exponent);
    let popularity: Vec<Vec<f64>> = (0..n_contexts)
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, &[1, c as u64]));
            let mut perm: Vec<usize> = (0..n_items).collect();
            perm.shuffle(&mut rng);
            let mut row = vec![0.0; n_items];
            for (rank, &item) in perm.iter().enumerate() {
                row[item] = weights[rank];
            }
            row
        })
        .collect();

    let mut catalog = ItemCatalog {
        n_items,
        n_categories,
        n_contexts,
        n_groups: 1,
        category_of: vec![0; n_items],
        group_of: vec![0; n_items],
        popularity,
    };

    catalog.category_of = match categories {
        CategoryAssignment::Independent => {
            let mut labels: Vec<usize> = (0..n_items).map(|i| i % n_categories).collect();
            labels.shuffle(&mut rng_from_seed(derive_seed(seed, &[2])));
            labels
        }
        CategoryAssignment::ByPopularity => {
            let order = popularity_order(&catalog.mean_popularity());
            let mut labels = vec![0; n_items];
            // most popular block gets category 0
            for (pos, &item) in order.iter().rev().enumerate() {
                labels[item] = pos * n_categories / n_items;
            }
            labels
        }
    };
    Ok(catalog)
}

/// Items sorted by ascending popularity, ties by ascending id.
fn popularity_order(pop: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| pop[a].total_cmp(&pop[b]).then(a.cmp(&b)));
    order
}

/// Splits items into `n_groups` equal-count popularity quantiles.
///
/// Group 0 holds the least popular items. When `n_items` is not a multiple
/// of `n_groups` the extra items go to the most popular groups.
pub fn assign_popularity_groups(mut catalog: ItemCatalog, n_groups: usize) -> Result<ItemCatalog> {
    if n_groups < 2 {
        return Err(Error::invalid("n_groups", "need at least 2 groups"));
    }
    if n_groups > catalog.n_items {
        return Err(Error::invalid(
            "n_groups",
            format!("{n_groups} groups for {} items", catalog.n_items),
        ));
    }
    let order = popularity_order(&catalog.mean_popularity());
    let base = catalog.n_items / n_groups;
    let extra = catalog.n_items % n_groups;
    let mut pos = 0;
    for g in 0..n_groups {
        let size = base + usize::from(g >= n_groups - extra);
        for &item in &order[pos..pos + size] {
            catalog.group_of[item] = g;
        }
        pos += size;
    }
    catalog.n_groups = n_groups;
    Ok(catalog)
}

/// Logged positive interactions `(context, item)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSet {
    pub n_contexts: usize,
    pub n_items: usize,
    pub records: Vec<(usize, usize)>,
    pub counts: Vec<Vec<u64>>,
}

impl InteractionSet {
    pub fn from_records(n_contexts: usize, n_items: usize, records: Vec<(usize, usize)>) -> Result<Self> {
        let mut counts = vec![vec![0u64; n_items]; n_contexts];
        for (idx, &(c, i)) in records.iter().enumerate() {
            if c >= n_contexts || i >= n_items {
                return Err(Error::invalid(
                    format!("records[{idx}]"),
                    format!("({c}, {i}) outside {n_contexts} contexts x {n_items} items"),
                ));
            }
            counts[c][i] += 1;
        }
        Ok(Self {
            n_contexts,
            n_items,
            records,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn context_total(&self, context: usize) -> u64 {
        self.counts[context].iter().sum()
    }

    /// Keeps `round(fraction * len)` records (at least one), chosen without
    /// replacement, in their original order.
    pub fn subsample(&self, fraction: f64, rng: &mut LabRng) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid("subsample_fraction", "must lie in (0, 1]"));
        }
        if self.is_empty() {
            return Err(Error::Empty("interactions"));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let keep = ((fraction * self.len() as f64).round() as usize).clamp(1, self.len());
        let mut picked = sample_indices(rng, self.len(), keep).into_vec();
        picked.sort_unstable();
        let records = picked.into_iter().map(|i| self.records[i]).collect();
        Self::from_records(self.n_contexts, self.n_items, records)
    }
}

/// Draws `n_samples` positives: a uniform context, then an item from
/// `p_D(·|context)` by inverse CDF.
pub fn sample_interactions(catalog: &ItemCatalog, n_samples: usize, seed: u64) -> Result<InteractionSet> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let records = (0..n_samples)
        .map(|_| {
            let c = if catalog.n_contexts == 1 {
                0
            } else {
                rng.gen_range(0..catalog.n_contexts)
            };
            (c, sample_categorical(&catalog.popularity[c], &mut rng))
        })
        .collect();
    InteractionSet::from_records(catalog.n_contexts, catalog.n_items, records)
}

/// Inverse-CDF draw from a probability vector. Zero-mass entries are never
/// returned.
pub(crate) fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Normalized counts for one context.
pub fn empirical_distribution(interactions: &InteractionSet, context: usize) -> Result<Vec<f64>> {
    let row = interactions.counts.get(context).ok_or(Error::ContextOutOfRange {
        context,
        n_contexts: interactions.n_contexts,
    })?;
    let total: u64 = row.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no records for context"));
    }
    Ok(row.iter().map(|&c| c as f64 / total as f64).collect())
}
